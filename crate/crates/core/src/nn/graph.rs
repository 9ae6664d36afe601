//! Reverse-mode automatic differentiation over row-major 2-D tensors.
//!
//! Every tensor is an `Array2<f64>` whose rows index the batch. Convolutional
//! activations are stored flattened in channel-major (`C×H×W`) order along the
//! columns, with the geometry carried by the op that produced them.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Node(usize);

/// Spatial layout of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Layout of a max-pooling window; channels are pooled independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeometry {
    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

enum Op {
    Leaf,
    MatMul(Node, Node),
    AddBias(Node, Node),
    Add(Node, Node),
    Scale(Node, f64),
    Relu(Node),
    NormalizeRows {
        input: Node,
        norms: Vec<f64>,
    },
    SliceCols {
        input: Node,
        start: usize,
    },
    GatherRows {
        input: Node,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<Node>),
    Conv2d {
        input: Node,
        weight: Node,
        bias: Node,
        geom: ConvGeometry,
    },
    MaxPool {
        input: Node,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Node,
        spatial: usize,
    },
    SoftmaxCrossEntropy {
        logits: Node,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
    SupCon {
        logits: Node,
        positives: Vec<Vec<usize>>,
        probs: Array2<f64>,
        anchors: usize,
    },
    JsToTarget {
        logits: Node,
        target: Array2<f64>,
        probs: Array2<f64>,
    },
    NegDistance {
        input: Node,
        protos: Array2<f64>,
        weights: Option<Vec<f64>>,
    },
    WeightedSum(Vec<(Node, f64)>),
}

struct Entry {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<usize>,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Entry>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Array2<f64>>>,
    by_param: Vec<(usize, Node)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `node`, if it was reached.
    pub fn wrt(&self, node: Node) -> Option<&Array2<f64>> {
        self.by_node.get(node.0).and_then(|g| g.as_ref())
    }

    /// Gradient for the parameter registered under `id`.
    pub fn param(&self, id: usize) -> Option<&Array2<f64>> {
        self.by_param
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.wrt(*n))
    }
}

const NORM_EPS: f64 = 1e-12;

fn log_softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Node {
        self.nodes.push(Entry {
            value,
            op,
            needs_grad,
            param: None,
        });
        Node(self.nodes.len() - 1)
    }

    fn needs(&self, n: Node) -> bool {
        self.nodes[n.0].needs_grad
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Array2<f64>) -> Node {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives gradients but is not tied to a parameter slot.
    pub fn variable(&mut self, value: Array2<f64>) -> Node {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to parameter slot `id`.
    pub fn param(&mut self, id: usize, value: Array2<f64>) -> Node {
        let n = self.push(value, Op::Leaf, true);
        self.nodes[n.0].param = Some(id);
        n
    }

    /// Copy of `n` that blocks gradient flow.
    pub fn detach(&mut self, n: Node) -> Node {
        let v = self.nodes[n.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, n: Node) -> &Array2<f64> {
        &self.nodes[n.0].value
    }

    pub fn scalar(&self, n: Node) -> f64 {
        self.nodes[n.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::internal(format!(
                "matmul shape mismatch {:?} x {:?}",
                va.dim(),
                vb.dim()
            )));
        }
        let v = va.dot(vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn add_bias(&mut self, a: Node, bias: Node) -> Result<Node> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.nrows() != 1 || vb.ncols() != va.ncols() {
            return Err(Error::internal(format!(
                "bias shape {:?} incompatible with {:?}",
                vb.dim(),
                va.dim()
            )));
        }
        let v = va + &vb.row(0);
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(v, Op::AddBias(a, bias), ng))
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::internal(format!(
                "add shape mismatch {:?} + {:?}",
                va.dim(),
                vb.dim()
            )));
        }
        let v = va + vb;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, a: Node, factor: f64) -> Node {
        let v = self.value(a) * factor;
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, factor), ng)
    }

    pub fn relu(&mut self, a: Node) -> Node {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Node) -> Node {
        let va = self.value(a);
        let mut v = va.clone();
        let mut norms = Vec::with_capacity(va.nrows());
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_EPS);
            row.mapv_inplace(|x| x / n);
            norms.push(n);
        }
        let ng = self.needs(a);
        self.push(v, Op::NormalizeRows { input: a, norms }, ng)
    }

    pub fn slice_cols(&mut self, a: Node, start: usize, end: usize) -> Result<Node> {
        let va = self.value(a);
        if start > end || end > va.ncols() {
            return Err(Error::internal(format!(
                "column slice {start}..{end} out of range for {} columns",
                va.ncols()
            )));
        }
        let v = va.slice(s![.., start..end]).to_owned();
        let ng = self.needs(a);
        Ok(self.push(v, Op::SliceCols { input: a, start }, ng))
    }

    pub fn gather_rows(&mut self, a: Node, rows: &[usize]) -> Result<Node> {
        let va = self.value(a);
        if let Some(&r) = rows.iter().find(|&&r| r >= va.nrows()) {
            return Err(Error::internal(format!(
                "row {r} out of range for {} rows",
                va.nrows()
            )));
        }
        let v = va.select(Axis(0), rows);
        let ng = self.needs(a);
        Ok(self.push(
            v,
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Node]) -> Result<Node> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::internal(format!("concat failed: {e}")))?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// 2-D convolution with weight `out_c × (in_c·k·k)` and bias `1 × out_c`.
    pub fn conv2d(
        &mut self,
        input: Node,
        weight: Node,
        bias: Node,
        geom: ConvGeometry,
    ) -> Result<Node> {
        let vi = self.value(input);
        let vw = self.value(weight);
        let vb = self.value(bias);
        if vi.ncols() != geom.in_len()
            || vw.dim() != (geom.out_channels, geom.patch_len())
            || vb.dim() != (1, geom.out_channels)
        {
            return Err(Error::internal(format!(
                "conv2d shapes input {:?} weight {:?} bias {:?} do not match {geom:?}",
                vi.dim(),
                vw.dim(),
                vb.dim()
            )));
        }
        let batch = vi.nrows();
        let spatial = geom.out_height() * geom.out_width();
        let mut out = Array2::zeros((batch, geom.out_len()));
        for b in 0..batch {
            let cols = im2col(vi.row(b).as_slice().unwrap_or(&vi.row(b).to_vec()), &geom);
            let mut res = vw.dot(&cols);
            for (oc, mut r) in res.rows_mut().into_iter().enumerate() {
                let bias_v = vb[[0, oc]];
                r.mapv_inplace(|x| x + bias_v);
            }
            let flat = res
                .into_shape_with_order(geom.out_channels * spatial)
                .map_err(|e| Error::internal(e.to_string()))?;
            out.row_mut(b).assign(&flat);
        }
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        ))
    }

    pub fn max_pool(&mut self, input: Node, geom: PoolGeometry) -> Result<Node> {
        let vi = self.value(input);
        let in_sp = geom.in_height * geom.in_width;
        if vi.ncols() != geom.channels * in_sp {
            return Err(Error::internal("max_pool input width mismatch"));
        }
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let out_len = geom.channels * oh * ow;
        let mut out = Array2::zeros((vi.nrows(), out_len));
        let mut argmax = vec![0usize; vi.nrows() * out_len];
        for b in 0..vi.nrows() {
            let row = vi.row(b);
            for c in 0..geom.channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for ky in 0..geom.kernel {
                            for kx in 0..geom.kernel {
                                let y = (oy * geom.stride + ky) as isize - geom.padding as isize;
                                let x = (ox * geom.stride + kx) as isize - geom.padding as isize;
                                if y < 0
                                    || x < 0
                                    || y >= geom.in_height as isize
                                    || x >= geom.in_width as isize
                                {
                                    continue;
                                }
                                let idx = c * in_sp + y as usize * geom.in_width + x as usize;
                                if row[idx] > best {
                                    best = row[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = c * oh * ow + oy * ow + ox;
                        out[[b, o]] = best;
                        argmax[b * out_len + o] = best_idx;
                    }
                }
            }
        }
        let ng = self.needs(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, ng))
    }

    /// Averages each channel's `spatial` consecutive columns.
    pub fn global_avg_pool(&mut self, input: Node, channels: usize) -> Result<Node> {
        let vi = self.value(input);
        if channels == 0 || !vi.ncols().is_multiple_of(channels) {
            return Err(Error::internal("global_avg_pool channel count mismatch"));
        }
        let spatial = vi.ncols() / channels;
        let mut out = Array2::zeros((vi.nrows(), channels));
        for (b, row) in vi.rows().into_iter().enumerate() {
            for c in 0..channels {
                out[[b, c]] = row.slice(s![c * spatial..(c + 1) * spatial]).sum() / spatial as f64;
            }
        }
        let ng = self.needs(input);
        Ok(self.push(out, Op::GlobalAvgPool { input, spatial }, ng))
    }

    /// Mean cross-entropy of softmax(`logits`) against integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: Node, targets: &[usize]) -> Result<Node> {
        let vl = self.value(logits);
        if vl.nrows() != targets.len() || vl.nrows() == 0 {
            return Err(Error::internal(format!(
                "cross-entropy with {} rows and {} targets",
                vl.nrows(),
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vl.ncols()) {
            return Err(Error::input(format!(
                "target {t} outside {} logits",
                vl.ncols()
            )));
        }
        let logp = log_softmax_rows(vl.view());
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(i, &t)| logp[[i, t]])
            .sum::<f64>()
            / targets.len() as f64;
        let probs = logp.mapv(f64::exp);
        let ng = self.needs(logits);
        Ok(self.push(
            scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Supervised contrastive objective from precomputed similarity logits.
    ///
    /// Row `i` contributes `-(1/|P_i|) Σ_{p∈P_i} log softmax(logits_i)_p`; rows
    /// with an empty positive set are skipped and excluded from the mean.
    pub fn supcon(&mut self, logits: Node, positives: Vec<Vec<usize>>) -> Result<Node> {
        let vl = self.value(logits);
        if positives.len() != vl.nrows() {
            return Err(Error::internal("supcon positive sets do not match rows"));
        }
        if vl.ncols() == 0 {
            return Err(Error::input("contrastive candidate set is empty"));
        }
        let logp = log_softmax_rows(vl.view());
        let mut total = 0.0;
        let mut anchors = 0;
        for (i, pos) in positives.iter().enumerate() {
            if pos.is_empty() {
                continue;
            }
            if pos.iter().any(|&p| p >= vl.ncols()) {
                return Err(Error::internal("positive index outside candidate set"));
            }
            anchors += 1;
            total -= pos.iter().map(|&p| logp[[i, p]]).sum::<f64>() / pos.len() as f64;
        }
        let loss = if anchors == 0 {
            0.0
        } else {
            total / anchors as f64
        };
        let probs = logp.mapv(f64::exp);
        let ng = self.needs(logits);
        Ok(self.push(
            scalar(loss),
            Op::SupCon {
                logits,
                positives,
                probs,
                anchors,
            },
            ng,
        ))
    }

    /// Mean Jensen–Shannon divergence between each `target` row and softmax(`logits`).
    pub fn js_to_target(&mut self, logits: Node, target: Array2<f64>) -> Result<Node> {
        let vl = self.value(logits);
        if vl.dim() != target.dim() || vl.nrows() == 0 {
            return Err(Error::input(format!(
                "js target shape {:?} does not match logits {:?}",
                target.dim(),
                vl.dim()
            )));
        }
        let probs = log_softmax_rows(vl.view()).mapv(f64::exp);
        let mut total = 0.0;
        for (p, q) in target.rows().into_iter().zip(probs.rows()) {
            total += crate::cepredictor::js_divergence_unchecked(
                p.as_slice().unwrap_or(&p.to_vec()),
                q.as_slice().unwrap_or(&q.to_vec()),
            );
        }
        let loss = total / vl.nrows() as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            scalar(loss),
            Op::JsToTarget {
                logits,
                target,
                probs,
            },
            ng,
        ))
    }

    /// `out[i, j] = -sqrt(Σ_d w_d (x_id - p_jd)^2)`; unit weights when `weights` is `None`.
    pub fn neg_distance(
        &mut self,
        input: Node,
        protos: Array2<f64>,
        weights: Option<Vec<f64>>,
    ) -> Result<Node> {
        let vi = self.value(input);
        if vi.ncols() != protos.ncols() {
            return Err(Error::internal("distance dimension mismatch"));
        }
        if let Some(w) = &weights {
            if w.len() != protos.ncols() {
                return Err(Error::internal("distance weight length mismatch"));
            }
        }
        let mut out = Array2::zeros((vi.nrows(), protos.nrows()));
        for (i, x) in vi.rows().into_iter().enumerate() {
            for (j, p) in protos.rows().into_iter().enumerate() {
                let d2: f64 = x
                    .iter()
                    .zip(p.iter())
                    .enumerate()
                    .map(|(d, (a, b))| {
                        let w = weights.as_ref().map_or(1.0, |w| w[d]);
                        w * (a - b) * (a - b)
                    })
                    .sum();
                out[[i, j]] = -d2.sqrt();
            }
        }
        let ng = self.needs(input);
        Ok(self.push(
            out,
            Op::NegDistance {
                input,
                protos,
                weights,
            },
            ng,
        ))
    }

    /// `Σ w_k · x_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Node, f64)]) -> Result<Node> {
        let mut total = 0.0;
        for &(n, w) in terms {
            let v = self.value(n);
            if v.dim() != (1, 1) {
                return Err(Error::internal("weighted_sum expects scalar nodes"));
            }
            total += w * v[[0, 0]];
        }
        let ng = terms.iter().any(|&(n, _)| self.needs(n));
        Ok(self.push(scalar(total), Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Node) -> Result<Gradients> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::internal("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let entry = &self.nodes[idx];
            if !entry.needs_grad {
                continue;
            }
            self.propagate(&entry.op, &entry.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let by_param = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.param.map(|p| (p, Node(i))))
            .collect();
        Ok(Gradients {
            by_node: grads,
            by_param,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], n: Node, g: Array2<f64>) {
        if !self.needs(n) {
            return;
        }
        match &mut grads[n.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Array2<f64>,
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = g.dot(&self.value(*b).t());
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = self.value(*a).t().dot(g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g * *f),
            Op::Relu(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(out, |gv, &o| {
                    if o <= 0.0 {
                        *gv = 0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::NormalizeRows { input, norms } => {
                let mut ga = Array2::zeros(g.dim());
                for (i, ((gr, yr), mut dst)) in g
                    .rows()
                    .into_iter()
                    .zip(out.rows())
                    .zip(ga.rows_mut())
                    .enumerate()
                {
                    let proj = gr.dot(&yr);
                    let n = norms[i];
                    dst.assign(&((&gr - &(&yr * proj)) / n));
                }
                self.accumulate(grads, *input, ga);
            }
            Op::SliceCols { input, start } => {
                let mut ga = Array2::zeros(self.value(*input).dim());
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *input, ga);
            }
            Op::GatherRows { input, rows } => {
                let mut ga = Array2::zeros(self.value(*input).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = ga.row_mut(r);
                    dst += &g.row(i);
                }
                self.accumulate(grads, *input, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    let gp = g.slice(s![.., offset..offset + w]).to_owned();
                    self.accumulate(grads, p, gp);
                    offset += w;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let vi = self.value(*input);
                let vw = self.value(*weight);
                let spatial = geom.out_height() * geom.out_width();
                let mut gw = Array2::zeros(vw.dim());
                let mut gb = Array2::zeros((1, geom.out_channels));
                let mut gi = Array2::zeros(vi.dim());
                for b in 0..vi.nrows() {
                    let gout = g
                        .row(b)
                        .to_owned()
                        .into_shape_with_order((geom.out_channels, spatial))
                        .expect("conv gradient reshape");
                    if self.needs(*weight) {
                        let row = vi.row(b).to_vec();
                        let cols = im2col(&row, geom);
                        gw += &gout.dot(&cols.t());
                    }
                    if self.needs(*bias) {
                        let sums = gout.sum_axis(Axis(1));
                        gb.row_mut(0).zip_mut_with(&sums, |d, s| *d += s);
                    }
                    if self.needs(*input) {
                        let gcols = vw.t().dot(&gout);
                        let mut dst = gi.row_mut(b);
                        col2im_add(&gcols, geom, dst.as_slice_mut().expect("contiguous row"));
                    }
                }
                self.accumulate(grads, *weight, gw);
                self.accumulate(grads, *bias, gb);
                self.accumulate(grads, *input, gi);
            }
            Op::MaxPool { input, argmax } => {
                let mut gi = Array2::zeros(self.value(*input).dim());
                let out_len = g.ncols();
                for b in 0..g.nrows() {
                    for o in 0..out_len {
                        let src = argmax[b * out_len + o];
                        if src != usize::MAX {
                            gi[[b, src]] += g[[b, o]];
                        }
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::GlobalAvgPool { input, spatial } => {
                let mut gi = Array2::zeros(self.value(*input).dim());
                for b in 0..g.nrows() {
                    for c in 0..g.ncols() {
                        let v = g[[b, c]] / *spatial as f64;
                        gi.slice_mut(s![b, c * spatial..(c + 1) * spatial]).fill(v);
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let upstream = g[[0, 0]];
                let n = targets.len() as f64;
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gl[[i, t]] -= 1.0;
                }
                gl.mapv_inplace(|v| v * upstream / n);
                self.accumulate(grads, *logits, gl);
            }
            Op::SupCon {
                logits,
                positives,
                probs,
                anchors,
            } => {
                let mut gl = Array2::zeros(probs.dim());
                if *anchors > 0 {
                    let scale = g[[0, 0]] / *anchors as f64;
                    for (i, pos) in positives.iter().enumerate() {
                        if pos.is_empty() {
                            continue;
                        }
                        let mut row = gl.row_mut(i);
                        row.assign(&probs.row(i));
                        let share = 1.0 / pos.len() as f64;
                        for &p in pos {
                            row[p] -= share;
                        }
                        row.mapv_inplace(|v| v * scale);
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::JsToTarget {
                logits,
                target,
                probs,
            } => {
                let scale = g[[0, 0]] / probs.nrows() as f64;
                let mut gl = Array2::zeros(probs.dim());
                for ((p, q), mut dst) in target
                    .rows()
                    .into_iter()
                    .zip(probs.rows())
                    .zip(gl.rows_mut())
                {
                    // dJS/dq_c = ½ ln(q_c / m_c), then through the softmax Jacobian.
                    let gq: Vec<f64> = p
                        .iter()
                        .zip(q.iter())
                        .map(|(&pc, &qc)| {
                            if qc <= 0.0 {
                                0.0
                            } else {
                                0.5 * (qc / (0.5 * (pc + qc))).ln()
                            }
                        })
                        .collect();
                    let inner: f64 = q.iter().zip(&gq).map(|(a, b)| a * b).sum();
                    for c in 0..q.len() {
                        dst[c] = q[c] * (gq[c] - inner) * scale;
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::NegDistance {
                input,
                protos,
                weights,
            } => {
                let vi = self.value(*input);
                let mut gi = Array2::zeros(vi.dim());
                for i in 0..vi.nrows() {
                    for j in 0..protos.nrows() {
                        let dist = -out[[i, j]];
                        if dist <= NORM_EPS {
                            continue;
                        }
                        let coef = -g[[i, j]] / dist;
                        for d in 0..vi.ncols() {
                            let w = weights.as_ref().map_or(1.0, |w| w[d]);
                            gi[[i, d]] += coef * w * (vi[[i, d]] - protos[[j, d]]);
                        }
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::WeightedSum(terms) => {
                for &(n, w) in terms {
                    self.accumulate(grads, n, scalar(g[[0, 0]] * w));
                }
            }
        }
    }
}

fn im2col(input: &[f64], geom: &ConvGeometry) -> Array2<f64> {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let k = geom.kernel;
    let mut cols = Array2::zeros((geom.patch_len(), oh * ow));
    for c in 0..geom.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let y = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if y < 0 || y >= geom.in_height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if x < 0 || x >= geom.in_width as isize {
                            continue;
                        }
                        cols[[r, oy * ow + ox]] = input
                            [c * geom.in_height * geom.in_width + y as usize * geom.in_width + x as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &Array2<f64>, geom: &ConvGeometry, dst: &mut [f64]) {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let k = geom.kernel;
    for c in 0..geom.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let y = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if y < 0 || y >= geom.in_height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if x < 0 || x >= geom.in_width as isize {
                            continue;
                        }
                        dst[c * geom.in_height * geom.in_width + y as usize * geom.in_width + x as usize] +=
                            cols[[r, oy * ow + ox]];
                    }
                }
            }
        }
    }
}
