use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        a: usize,
        bias: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Relu {
        a: usize,
    },
    LeakyRelu {
        a: usize,
        slope: f64,
    },
    ConcatCols {
        a: usize,
        b: usize,
    },
    GatherRows {
        a: usize,
        ids: Vec<u32>,
    },
    SegmentMean {
        a: usize,
        ids: Vec<u32>,
        counts: Vec<f64>,
    },
    LogSoftmax {
        a: usize,
    },
    NllMean {
        a: usize,
        targets: Vec<u32>,
    },
    SpmmConst {
        a: usize,
        offsets: Vec<usize>,
        sources: Vec<u32>,
        coefs: Vec<f64>,
    },
    EdgeSoftmax {
        a: usize,
        offsets: Vec<usize>,
    },
    HeadDot {
        x: usize,
        a: usize,
        heads: usize,
    },
    HeadWeightedScatter {
        alpha: usize,
        values: usize,
        offsets: Vec<usize>,
        sources: Vec<u32>,
        heads: usize,
    },
    EdgeDotHeads {
        a: usize,
        b: usize,
        offsets: Vec<usize>,
        sources: Vec<u32>,
        heads: usize,
        scale: f64,
    },
    AverageHeads {
        a: usize,
        heads: usize,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    AffineNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Conv2d {
        x: usize,
        w: usize,
        c_in: usize,
        h: usize,
        wdim: usize,
        c_out: usize,
        ksize: usize,
    },
    NchwToRows {
        a: usize,
        channels: usize,
        h: usize,
        w: usize,
    },
    RowsToNchw {
        a: usize,
        channels: usize,
        h: usize,
        w: usize,
    },
    BilinearResize {
        a: usize,
        channels: usize,
        h_in: usize,
        w_in: usize,
        h_out: usize,
        w_out: usize,
    },
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Eager computation tape. Create leaves, apply operations, then call
/// [`Tape::backward`] on a scalar to obtain gradients for every node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input or parameter value.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(Error::validation(format!(
                "leaf value length {} does not match {rows}x{cols}",
                value.len()
            )));
        }
        Ok(self.push(rows, cols, value, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Extract a scalar loss value, rejecting non-finite results.
    pub fn loss_value(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.rows * n.cols != 1 {
            return Err(Error::validation(format!(
                "loss must be scalar, got {}x{}",
                n.rows, n.cols
            )));
        }
        let value = n.value[0];
        if !value.is_finite() {
            return Err(Error::training(format!("loss is not finite: {value}")));
        }
        Ok(value)
    }

    /// Batch statistics recorded by a training-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNormTrain { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::validation(format!(
                "matmul shape mismatch: {ar}x{ac} times {br}x{bc}"
            )));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; ar * bc];
        for i in 0..ar {
            for p in 0..ac {
                let lhs = av[i * ac + p];
                if lhs == 0.0 {
                    continue;
                }
                let brow = &bv[p * bc..(p + 1) * bc];
                let orow = &mut out[i * bc..(i + 1) * bc];
                for (o, &bval) in orow.iter_mut().zip(brow) {
                    *o += lhs * bval;
                }
            }
        }
        Ok(self.push(ar, bc, out, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::validation("add shape mismatch"));
        }
        let (r, c) = self.shape(a);
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(r, c, value, Op::Add { a: a.0, b: b.0 }))
    }

    /// Add a 1xC bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != c {
            return Err(Error::validation(format!(
                "bias must be 1x{c}, got {br}x{bc}"
            )));
        }
        let bv = self.nodes[bias.0].value.clone();
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(&bv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        Ok(self.push(
            r,
            c,
            value,
            Op::AddBias {
                a: a.0,
                bias: bias.0,
            },
        ))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.shape(a);
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * factor).collect();
        self.push(r, c, value, Op::Scale { a: a.0, factor })
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        self.push(r, c, value, Op::Relu { a: a.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let (r, c) = self.shape(a);
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        self.push(r, c, value, Op::LeakyRelu { a: a.0, slope })
    }

    /// Horizontal concatenation `[A | B]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(Error::validation(format!(
                "concat row mismatch: {ar} vs {br}"
            )));
        }
        let mut value = Vec::with_capacity(ar * (ac + bc));
        for i in 0..ar {
            value.extend_from_slice(&self.nodes[a.0].value[i * ac..(i + 1) * ac]);
            value.extend_from_slice(&self.nodes[b.0].value[i * bc..(i + 1) * bc]);
        }
        Ok(self.push(ar, ac + bc, value, Op::ConcatCols { a: a.0, b: b.0 }))
    }

    /// Row gather: output row i = input row `ids[i]`.
    pub fn gather_rows(&mut self, a: Var, ids: &[u32]) -> Result<Var> {
        let (ar, c) = self.shape(a);
        for &id in ids {
            if id as usize >= ar {
                return Err(Error::validation(format!(
                    "gather id {id} out of range for {ar} rows"
                )));
            }
        }
        let mut value = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            value.extend_from_slice(&self.nodes[a.0].value[id as usize * c..(id as usize + 1) * c]);
        }
        Ok(self.push(
            ids.len(),
            c,
            value,
            Op::GatherRows {
                a: a.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Segment mean scatter: output row s = mean of input rows with id s.
    /// Every segment in `[0, num_segments)` must own at least one row.
    pub fn segment_mean(&mut self, a: Var, ids: &[u32], num_segments: usize) -> Result<Var> {
        let (ar, c) = self.shape(a);
        if ids.len() != ar {
            return Err(Error::validation(format!(
                "segment ids length {} does not match {ar} rows",
                ids.len()
            )));
        }
        let mut counts = vec![0.0f64; num_segments];
        for &id in ids {
            if id as usize >= num_segments {
                return Err(Error::validation(format!(
                    "segment id {id} out of range for {num_segments} segments"
                )));
            }
            counts[id as usize] += 1.0;
        }
        if let Some(empty) = counts.iter().position(|&n| n == 0.0) {
            return Err(Error::validation(format!("segment {empty} has no rows")));
        }
        let mut value = vec![0.0; num_segments * c];
        for (i, &id) in ids.iter().enumerate() {
            let row = &self.nodes[a.0].value[i * c..(i + 1) * c];
            let acc = &mut value[id as usize * c..(id as usize + 1) * c];
            for (o, &x) in acc.iter_mut().zip(row) {
                *o += x;
            }
        }
        for (s, chunk) in value.chunks_exact_mut(c).enumerate() {
            for o in chunk {
                *o /= counts[s];
            }
        }
        Ok(self.push(
            num_segments,
            c,
            value,
            Op::SegmentMean {
                a: a.0,
                ids: ids.to_vec(),
                counts,
            },
        ))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut value = Vec::with_capacity(r * c);
        for row in self.nodes[a.0].value.chunks_exact(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            value.extend(row.iter().map(|x| x - lse));
        }
        self.push(r, c, value, Op::LogSoftmax { a: a.0 })
    }

    /// Negative mean of `a[i, targets[i]]`; with log-softmax input this is
    /// the mean cross-entropy over the target rows.
    pub fn nll_mean(&mut self, a: Var, targets: &[u32]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if targets.len() != r {
            return Err(Error::validation(format!(
                "{} targets for {r} rows",
                targets.len()
            )));
        }
        if targets.is_empty() {
            return Err(Error::training("no labels in batch"));
        }
        let mut sum = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t as usize >= c {
                return Err(Error::validation(format!(
                    "target class {t} out of range for {c} columns"
                )));
            }
            sum += self.nodes[a.0].value[i * c + t as usize];
        }
        let value = vec![-sum / r as f64];
        Ok(self.push(
            1,
            1,
            value,
            Op::NllMean {
                a: a.0,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Sparse matrix multiply with constant coefficients:
    /// `out[dst] = sum over incoming (dst, src) of coef * a[src]`.
    /// The sparse structure is CSR over destinations; `coefs` aligns with
    /// `sources`.
    pub fn spmm_const(
        &mut self,
        a: Var,
        offsets: &[usize],
        sources: &[u32],
        coefs: &[f64],
    ) -> Result<Var> {
        let (ar, c) = self.shape(a);
        let n = offsets.len() - 1;
        if sources.len() != coefs.len() || *offsets.last().unwrap() != sources.len() {
            return Err(Error::validation("sparse structure is inconsistent"));
        }
        for &s in sources {
            if s as usize >= ar {
                return Err(Error::validation(format!(
                    "sparse source {s} out of range for {ar} rows"
                )));
            }
        }
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; n * c];
        for dst in 0..n {
            let orow = &mut value[dst * c..(dst + 1) * c];
            for e in offsets[dst]..offsets[dst + 1] {
                let src = sources[e] as usize;
                let coef = coefs[e];
                let arow = &av[src * c..(src + 1) * c];
                for (o, &x) in orow.iter_mut().zip(arow) {
                    *o += coef * x;
                }
            }
        }
        Ok(self.push(
            n,
            c,
            value,
            Op::SpmmConst {
                a: a.0,
                offsets: offsets.to_vec(),
                sources: sources.to_vec(),
                coefs: coefs.to_vec(),
            },
        ))
    }

    /// Column-wise softmax within each row group given by `offsets`
    /// (rows `offsets[g]..offsets[g+1]` form group g).
    pub fn edge_softmax(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if *offsets.last().unwrap_or(&0) != r {
            return Err(Error::validation(
                "edge softmax groups do not cover the rows",
            ));
        }
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; r * c];
        for g in 0..offsets.len() - 1 {
            let (lo, hi) = (offsets[g], offsets[g + 1]);
            for col in 0..c {
                let mut max = f64::NEG_INFINITY;
                for e in lo..hi {
                    max = max.max(av[e * c + col]);
                }
                let mut denom = 0.0;
                for e in lo..hi {
                    denom += (av[e * c + col] - max).exp();
                }
                for e in lo..hi {
                    value[e * c + col] = (av[e * c + col] - max).exp() / denom;
                }
            }
        }
        Ok(self.push(
            r,
            c,
            value,
            Op::EdgeSoftmax {
                a: a.0,
                offsets: offsets.to_vec(),
            },
        ))
    }

    /// Per-head dot with a head-specific vector: `x` is Sx(heads*d), `a` is
    /// heads x d; output is S x heads with
    /// `out[i, h] = sum_k x[i, h*d + k] * a[h, k]`.
    pub fn head_dot(&mut self, x: Var, a: Var, heads: usize) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        let (ar, ac) = self.shape(a);
        if ar != heads || xc != heads * ac {
            return Err(Error::validation(format!(
                "head_dot shapes {xr}x{xc} and {ar}x{ac} inconsistent with {heads} heads"
            )));
        }
        let d = ac;
        let xv = &self.nodes[x.0].value;
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; xr * heads];
        for i in 0..xr {
            for h in 0..heads {
                let mut sum = 0.0;
                for k in 0..d {
                    sum += xv[i * xc + h * d + k] * av[h * d + k];
                }
                value[i * heads + h] = sum;
            }
        }
        Ok(self.push(
            xr,
            heads,
            value,
            Op::HeadDot {
                x: x.0,
                a: a.0,
                heads,
            },
        ))
    }

    /// Attention-weighted neighborhood sum. `alpha` is (edges x heads),
    /// `values` is (S x heads*d); for each destination node the output head
    /// block is the alpha-weighted sum of its source nodes' value blocks.
    pub fn head_weighted_scatter(
        &mut self,
        alpha: Var,
        values: Var,
        offsets: &[usize],
        sources: &[u32],
        heads: usize,
    ) -> Result<Var> {
        let (er, eh) = self.shape(alpha);
        let (vr, vc) = self.shape(values);
        let n = offsets.len() - 1;
        if eh != heads || vc % heads != 0 {
            return Err(Error::validation("attention head shapes inconsistent"));
        }
        if er != sources.len() || *offsets.last().unwrap() != er {
            return Err(Error::validation(
                "edge structure does not match alpha rows",
            ));
        }
        for &s in sources {
            if s as usize >= vr {
                return Err(Error::validation("edge source out of range"));
            }
        }
        let d = vc / heads;
        let av = &self.nodes[alpha.0].value;
        let vv = &self.nodes[values.0].value;
        let mut value = vec![0.0; n * vc];
        for dst in 0..n {
            for e in offsets[dst]..offsets[dst + 1] {
                let src = sources[e] as usize;
                for h in 0..heads {
                    let w = av[e * heads + h];
                    for k in 0..d {
                        value[dst * vc + h * d + k] += w * vv[src * vc + h * d + k];
                    }
                }
            }
        }
        Ok(self.push(
            n,
            vc,
            value,
            Op::HeadWeightedScatter {
                alpha: alpha.0,
                values: values.0,
                offsets: offsets.to_vec(),
                sources: sources.to_vec(),
                heads,
            },
        ))
    }

    /// Per-edge, per-head scaled dot product between destination rows of `a`
    /// and source rows of `b`: `out[e, h] = scale * a[dst(e)]_h . b[src(e)]_h`.
    pub fn edge_dot_heads(
        &mut self,
        a: Var,
        b: Var,
        offsets: &[usize],
        sources: &[u32],
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc || ac % heads != 0 {
            return Err(Error::validation("edge dot shapes inconsistent"));
        }
        let n = offsets.len() - 1;
        if n != ar {
            return Err(Error::validation(
                "edge structure does not match node count",
            ));
        }
        for &s in sources {
            if s as usize >= br {
                return Err(Error::validation("edge source out of range"));
            }
        }
        let d = ac / heads;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let edges = sources.len();
        let mut value = vec![0.0; edges * heads];
        for dst in 0..n {
            for e in offsets[dst]..offsets[dst + 1] {
                let src = sources[e] as usize;
                for h in 0..heads {
                    let mut sum = 0.0;
                    for k in 0..d {
                        sum += av[dst * ac + h * d + k] * bv[src * ac + h * d + k];
                    }
                    value[e * heads + h] = scale * sum;
                }
            }
        }
        Ok(self.push(
            edges,
            heads,
            value,
            Op::EdgeDotHeads {
                a: a.0,
                b: b.0,
                offsets: offsets.to_vec(),
                sources: sources.to_vec(),
                heads,
                scale,
            },
        ))
    }

    /// Average the head blocks of an (S x heads*d) matrix down to S x d.
    pub fn average_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c % heads != 0 {
            return Err(Error::validation(format!(
                "{c} columns not divisible by {heads} heads"
            )));
        }
        let d = c / heads;
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; r * d];
        for i in 0..r {
            for h in 0..heads {
                for k in 0..d {
                    value[i * d + k] += av[i * c + h * d + k] / heads as f64;
                }
            }
        }
        Ok(self.push(r, d, value, Op::AverageHeads { a: a.0, heads }))
    }

    /// Training-mode batch normalization over columns with population
    /// statistics. Batch statistics are retained on the node for the
    /// caller's running-average update (see [`Tape::batch_stats`]).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r < 2 {
            return Err(Error::validation(
                "batch norm in training mode needs at least 2 rows",
            ));
        }
        self.check_affine_params(c, gamma, beta)?;
        let xv = &self.nodes[x.0].value;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= r as f64;
        }
        for row in xv.chunks_exact(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= r as f64;
        }
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut value = Vec::with_capacity(r * c);
        for row in xv.chunks_exact(c) {
            for j in 0..c {
                let xhat = (row[j] - mean[j]) / (var[j] + eps).sqrt();
                value.push(gv[j] * xhat + bv[j]);
            }
        }
        Ok(self.push(
            r,
            c,
            value,
            Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
                mean,
                var,
            },
        ))
    }

    /// Inference-mode normalization with fixed (running) statistics.
    pub fn affine_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (r, c) = self.shape(x);
        self.check_affine_params(c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::validation("running statistics shape mismatch"));
        }
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut value = Vec::with_capacity(r * c);
        for row in xv.chunks_exact(c) {
            for j in 0..c {
                let xhat = (row[j] - mean[j]) / (var[j] + eps).sqrt();
                value.push(gv[j] * xhat + bv[j]);
            }
        }
        Ok(self.push(
            r,
            c,
            value,
            Op::AffineNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
                mean: mean.to_vec(),
                var: var.to_vec(),
            },
        ))
    }

    fn check_affine_params(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::validation(format!(
                "scale/shift parameters must be 1x{c}"
            )));
        }
        Ok(())
    }

    /// 2-D cross-correlation over a batch of (C, H, W) images stored as rows
    /// of `x`. Kernels are (c_out x c_in*k*k); stride 1, zero padding k/2,
    /// so spatial dimensions are preserved. `ksize` must be 1 or 3.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        c_in: usize,
        h: usize,
        wdim: usize,
        ksize: usize,
    ) -> Result<Var> {
        let (n, xc) = self.shape(x);
        let (c_out, wc) = self.shape(w);
        if !(ksize == 1 || ksize == 3) {
            return Err(Error::validation("kernel size must be 1 or 3"));
        }
        if xc != c_in * h * wdim {
            return Err(Error::validation(format!(
                "input columns {xc} do not match {c_in}x{h}x{wdim}"
            )));
        }
        if wc != c_in * ksize * ksize {
            return Err(Error::validation(format!(
                "kernel columns {wc} do not match {c_in}x{ksize}x{ksize}"
            )));
        }
        let pad = ksize / 2;
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mut value = vec![0.0; n * c_out * h * wdim];
        for img in 0..n {
            let xbase = img * xc;
            let obase = img * c_out * h * wdim;
            for co in 0..c_out {
                for oy in 0..h {
                    for ox in 0..wdim {
                        let mut sum = 0.0;
                        for ci in 0..c_in {
                            for ky in 0..ksize {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                for kx in 0..ksize {
                                    let ix = ox + kx;
                                    if ix < pad || ix - pad >= wdim {
                                        continue;
                                    }
                                    let ix = ix - pad;
                                    sum += xv[xbase + ci * h * wdim + iy * wdim + ix]
                                        * wv[co * wc + ci * ksize * ksize + ky * ksize + kx];
                                }
                            }
                        }
                        value[obase + co * h * wdim + oy * wdim + ox] = sum;
                    }
                }
            }
        }
        Ok(self.push(
            n,
            c_out * h * wdim,
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                c_in,
                h,
                wdim,
                c_out,
                ksize,
            },
        ))
    }

    /// Reinterpret a batch of (C, H, W) rows as an (N*H*W) x C matrix so
    /// column-wise operations (batch norm, softmax) act per channel.
    pub fn nchw_to_rows(&mut self, a: Var, channels: usize, h: usize, w: usize) -> Result<Var> {
        let (n, c) = self.shape(a);
        if c != channels * h * w {
            return Err(Error::validation("channel layout mismatch"));
        }
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; n * h * w * channels];
        for img in 0..n {
            for ch in 0..channels {
                for p in 0..h * w {
                    value[(img * h * w + p) * channels + ch] = av[img * c + ch * h * w + p];
                }
            }
        }
        Ok(self.push(
            n * h * w,
            channels,
            value,
            Op::NchwToRows {
                a: a.0,
                channels,
                h,
                w,
            },
        ))
    }

    /// Inverse of [`Tape::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, a: Var, channels: usize, h: usize, w: usize) -> Result<Var> {
        let (rows, c) = self.shape(a);
        if c != channels || rows % (h * w) != 0 {
            return Err(Error::validation("row layout mismatch"));
        }
        let n = rows / (h * w);
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; n * channels * h * w];
        for img in 0..n {
            for ch in 0..channels {
                for p in 0..h * w {
                    value[img * channels * h * w + ch * h * w + p] =
                        av[(img * h * w + p) * channels + ch];
                }
            }
        }
        Ok(self.push(
            n,
            channels * h * w,
            value,
            Op::RowsToNchw {
                a: a.0,
                channels,
                h,
                w,
            },
        ))
    }

    /// Bilinear resampling of a batch of (C, H, W) rows, half-pixel-centered
    /// sampling (align_corners = false) with edge-clamped taps.
    pub fn bilinear_resize(
        &mut self,
        a: Var,
        channels: usize,
        h_in: usize,
        w_in: usize,
        h_out: usize,
        w_out: usize,
    ) -> Result<Var> {
        let (n, c) = self.shape(a);
        if c != channels * h_in * w_in {
            return Err(Error::validation("resize input layout mismatch"));
        }
        if h_out == 0 || w_out == 0 {
            return Err(Error::validation("resize target must be non-empty"));
        }
        let taps_y = resize_taps(h_in, h_out);
        let taps_x = resize_taps(w_in, w_out);
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; n * channels * h_out * w_out];
        for img in 0..n {
            for ch in 0..channels {
                let ibase = img * c + ch * h_in * w_in;
                let obase = (img * channels + ch) * h_out * w_out;
                for oy in 0..h_out {
                    let (y0, y1, fy) = taps_y[oy];
                    for ox in 0..w_out {
                        let (x0, x1, fx) = taps_x[ox];
                        let v00 = av[ibase + y0 * w_in + x0];
                        let v01 = av[ibase + y0 * w_in + x1];
                        let v10 = av[ibase + y1 * w_in + x0];
                        let v11 = av[ibase + y1 * w_in + x1];
                        value[obase + oy * w_out + ox] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                            + fy * ((1.0 - fx) * v10 + fx * v11);
                    }
                }
            }
        }
        Ok(self.push(
            n,
            channels * h_out * w_out,
            value,
            Op::BilinearResize {
                a: a.0,
                channels,
                h_in,
                w_in,
                h_out,
                w_out,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Nodes are visited in reverse
    /// creation order, which is a topological order of the DAG, so each
    /// node's gradient is complete before it is propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = &self.nodes[loss.0];
        if n.rows * n.cols != 1 {
            return Err(Error::validation(format!(
                "backward needs a scalar, got {}x{}",
                n.rows, n.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        fn acc(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
            grads[idx].get_or_insert_with(|| vec![0.0; len])
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ar, ac) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let bc = self.nodes[*b].cols;
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                {
                    // dA = G . B^T
                    let da = acc(grads, *a, ar * ac);
                    for i2 in 0..ar {
                        for p in 0..ac {
                            let mut sum = 0.0;
                            for j in 0..bc {
                                sum += g[i2 * bc + j] * bv[p * bc + j];
                            }
                            da[i2 * ac + p] += sum;
                        }
                    }
                }
                {
                    // dB = A^T . G
                    let db = acc(grads, *b, ac * bc);
                    for p in 0..ac {
                        for i2 in 0..ar {
                            let lhs = av[i2 * ac + p];
                            if lhs == 0.0 {
                                continue;
                            }
                            for j in 0..bc {
                                db[p * bc + j] += lhs * g[i2 * bc + j];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for idx in [*a, *b] {
                    let d = acc(grads, idx, g.len());
                    for (o, &x) in d.iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::AddBias { a, bias } => {
                let c = node.cols;
                {
                    let da = acc(grads, *a, g.len());
                    for (o, &x) in da.iter_mut().zip(g) {
                        *o += x;
                    }
                }
                {
                    let db = acc(grads, *bias, c);
                    for row in g.chunks_exact(c) {
                        for (o, &x) in db.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                let da = acc(grads, *a, g.len());
                for (o, &x) in da.iter_mut().zip(g) {
                    *o += factor * x;
                }
            }
            Op::Relu { a } => {
                let av = &self.nodes[*a].value;
                let da = acc(grads, *a, g.len());
                for ((o, &x), &inp) in da.iter_mut().zip(g).zip(av) {
                    if inp > 0.0 {
                        *o += x;
                    }
                }
            }
            Op::LeakyRelu { a, slope } => {
                let av = &self.nodes[*a].value;
                let da = acc(grads, *a, g.len());
                for ((o, &x), &inp) in da.iter_mut().zip(g).zip(av) {
                    *o += if inp > 0.0 { x } else { slope * x };
                }
            }
            Op::ConcatCols { a, b } => {
                let ac = self.nodes[*a].cols;
                let bc = self.nodes[*b].cols;
                let rows = node.rows;
                {
                    let da = acc(grads, *a, rows * ac);
                    for r in 0..rows {
                        for j in 0..ac {
                            da[r * ac + j] += g[r * (ac + bc) + j];
                        }
                    }
                }
                {
                    let db = acc(grads, *b, rows * bc);
                    for r in 0..rows {
                        for j in 0..bc {
                            db[r * bc + j] += g[r * (ac + bc) + ac + j];
                        }
                    }
                }
            }
            Op::GatherRows { a, ids } => {
                let c = node.cols;
                let da = acc(grads, *a, self.nodes[*a].rows * c);
                for (i2, &id) in ids.iter().enumerate() {
                    let src = &g[i2 * c..(i2 + 1) * c];
                    let dst = &mut da[id as usize * c..(id as usize + 1) * c];
                    for (o, &x) in dst.iter_mut().zip(src) {
                        *o += x;
                    }
                }
            }
            Op::SegmentMean { a, ids, counts } => {
                let c = node.cols;
                let da = acc(grads, *a, self.nodes[*a].rows * c);
                for (i2, &id) in ids.iter().enumerate() {
                    let grow = &g[id as usize * c..(id as usize + 1) * c];
                    let dst = &mut da[i2 * c..(i2 + 1) * c];
                    let inv = 1.0 / counts[id as usize];
                    for (o, &x) in dst.iter_mut().zip(grow) {
                        *o += x * inv;
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let c = node.cols;
                let da = acc(grads, *a, g.len());
                for (r, grow) in g.chunks_exact(c).enumerate() {
                    let out = &node.value[r * c..(r + 1) * c];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..c {
                        da[r * c + j] += grow[j] - out[j].exp() * gsum;
                    }
                }
            }
            Op::NllMean { a, targets } => {
                let c = self.nodes[*a].cols;
                let scale = g[0] / targets.len() as f64;
                let da = acc(grads, *a, self.nodes[*a].rows * c);
                for (i2, &t) in targets.iter().enumerate() {
                    da[i2 * c + t as usize] -= scale;
                }
            }
            Op::SpmmConst {
                a,
                offsets,
                sources,
                coefs,
            } => {
                let c = node.cols;
                let da = acc(grads, *a, self.nodes[*a].rows * c);
                for dst in 0..node.rows {
                    let grow = &g[dst * c..(dst + 1) * c];
                    for e in offsets[dst]..offsets[dst + 1] {
                        let src = sources[e] as usize;
                        let coef = coefs[e];
                        let drow = &mut da[src * c..(src + 1) * c];
                        for (o, &x) in drow.iter_mut().zip(grow) {
                            *o += coef * x;
                        }
                    }
                }
            }
            Op::EdgeSoftmax { a, offsets } => {
                let c = node.cols;
                let da = acc(grads, *a, g.len());
                for gi in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[gi], offsets[gi + 1]);
                    for col in 0..c {
                        let mut dot = 0.0;
                        for e in lo..hi {
                            dot += node.value[e * c + col] * g[e * c + col];
                        }
                        for e in lo..hi {
                            let alpha = node.value[e * c + col];
                            da[e * c + col] += alpha * (g[e * c + col] - dot);
                        }
                    }
                }
            }
            Op::HeadDot { x, a, heads } => {
                let xc = self.nodes[*x].cols;
                let d = xc / heads;
                let xv = &self.nodes[*x].value;
                let av = &self.nodes[*a].value;
                {
                    let dx = acc(grads, *x, xv.len());
                    for i2 in 0..node.rows {
                        for h in 0..*heads {
                            let gval = g[i2 * heads + h];
                            for k in 0..d {
                                dx[i2 * xc + h * d + k] += gval * av[h * d + k];
                            }
                        }
                    }
                }
                {
                    let da = acc(grads, *a, av.len());
                    for i2 in 0..node.rows {
                        for h in 0..*heads {
                            let gval = g[i2 * heads + h];
                            for k in 0..d {
                                da[h * d + k] += gval * xv[i2 * xc + h * d + k];
                            }
                        }
                    }
                }
            }
            Op::HeadWeightedScatter {
                alpha,
                values,
                offsets,
                sources,
                heads,
            } => {
                let vc = self.nodes[*values].cols;
                let d = vc / heads;
                let av = &self.nodes[*alpha].value;
                let vv = &self.nodes[*values].value;
                {
                    let dalpha = acc(grads, *alpha, av.len());
                    for dst in 0..node.rows {
                        for e in offsets[dst]..offsets[dst + 1] {
                            let src = sources[e] as usize;
                            for h in 0..*heads {
                                let mut sum = 0.0;
                                for k in 0..d {
                                    sum += g[dst * vc + h * d + k] * vv[src * vc + h * d + k];
                                }
                                dalpha[e * heads + h] += sum;
                            }
                        }
                    }
                }
                {
                    let dvalues = acc(grads, *values, vv.len());
                    for dst in 0..node.rows {
                        for e in offsets[dst]..offsets[dst + 1] {
                            let src = sources[e] as usize;
                            for h in 0..*heads {
                                let w = av[e * heads + h];
                                for k in 0..d {
                                    dvalues[src * vc + h * d + k] += w * g[dst * vc + h * d + k];
                                }
                            }
                        }
                    }
                }
            }
            Op::EdgeDotHeads {
                a,
                b,
                offsets,
                sources,
                heads,
                scale,
            } => {
                let ac = self.nodes[*a].cols;
                let d = ac / heads;
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                {
                    let da = acc(grads, *a, av.len());
                    for dst in 0..offsets.len() - 1 {
                        for e in offsets[dst]..offsets[dst + 1] {
                            let src = sources[e] as usize;
                            for h in 0..*heads {
                                let gval = scale * g[e * heads + h];
                                for k in 0..d {
                                    da[dst * ac + h * d + k] += gval * bv[src * ac + h * d + k];
                                }
                            }
                        }
                    }
                }
                {
                    let db = acc(grads, *b, bv.len());
                    for dst in 0..offsets.len() - 1 {
                        for e in offsets[dst]..offsets[dst + 1] {
                            let src = sources[e] as usize;
                            for h in 0..*heads {
                                let gval = scale * g[e * heads + h];
                                for k in 0..d {
                                    db[src * ac + h * d + k] += gval * av[dst * ac + h * d + k];
                                }
                            }
                        }
                    }
                }
            }
            Op::AverageHeads { a, heads } => {
                let d = node.cols;
                let c = d * heads;
                let da = acc(grads, *a, self.nodes[*a].rows * c);
                let inv = 1.0 / *heads as f64;
                for i2 in 0..node.rows {
                    for h in 0..*heads {
                        for k in 0..d {
                            da[i2 * c + h * d + k] += g[i2 * d + k] * inv;
                        }
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            } => {
                let c = node.cols;
                let r = node.rows as f64;
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gamma].value;
                // Column-wise reductions of the incoming gradient.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (row, grow) in xv.chunks_exact(c).zip(g.chunks_exact(c)) {
                    for j in 0..c {
                        let xhat = (row[j] - mean[j]) / (var[j] + eps).sqrt();
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * xhat;
                    }
                }
                {
                    let dbeta = acc(grads, *beta, c);
                    for (o, &x2) in dbeta.iter_mut().zip(&sum_g) {
                        *o += x2;
                    }
                }
                {
                    let dgamma = acc(grads, *gamma, c);
                    for (o, &x2) in dgamma.iter_mut().zip(&sum_gx) {
                        *o += x2;
                    }
                }
                {
                    let dx = acc(grads, *x, xv.len());
                    for (i2, (row, grow)) in xv.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                        for j in 0..c {
                            let std = (var[j] + eps).sqrt();
                            let xhat = (row[j] - mean[j]) / std;
                            // d xhat_i = (g_i - mean(g) - xhat_i * mean(g*xhat)) / std
                            dx[i2 * c + j] +=
                                gv[j] / std * (grow[j] - sum_g[j] / r - xhat * sum_gx[j] / r);
                        }
                    }
                }
            }
            Op::AffineNorm {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            } => {
                let c = node.cols;
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gamma].value;
                {
                    let dx = acc(grads, *x, xv.len());
                    for (i2, grow) in g.chunks_exact(c).enumerate() {
                        for j in 0..c {
                            dx[i2 * c + j] += grow[j] * gv[j] / (var[j] + eps).sqrt();
                        }
                    }
                }
                {
                    let dgamma = acc(grads, *gamma, c);
                    for (row, grow) in xv.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for j in 0..c {
                            let xhat = (row[j] - mean[j]) / (var[j] + eps).sqrt();
                            dgamma[j] += grow[j] * xhat;
                        }
                    }
                }
                {
                    let dbeta = acc(grads, *beta, c);
                    for grow in g.chunks_exact(c) {
                        for j in 0..c {
                            dbeta[j] += grow[j];
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                c_in,
                h,
                wdim,
                c_out,
                ksize,
            } => {
                let pad = ksize / 2;
                let xc = c_in * h * wdim;
                let wc = c_in * ksize * ksize;
                let n = self.nodes[*x].rows;
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                // Accumulate both adjoints in one pass over the same loop
                // nest as the forward, keeping the order deterministic.
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                for img in 0..n {
                    let xbase = img * xc;
                    let obase = img * c_out * h * wdim;
                    for co in 0..*c_out {
                        for oy in 0..*h {
                            for ox in 0..*wdim {
                                let gval = g[obase + co * h * wdim + oy * wdim + ox];
                                if gval == 0.0 {
                                    continue;
                                }
                                for ci in 0..*c_in {
                                    for ky in 0..*ksize {
                                        let iy = oy + ky;
                                        if iy < pad || iy - pad >= *h {
                                            continue;
                                        }
                                        let iy = iy - pad;
                                        for kx in 0..*ksize {
                                            let ix = ox + kx;
                                            if ix < pad || ix - pad >= *wdim {
                                                continue;
                                            }
                                            let ix = ix - pad;
                                            let xi = xbase + ci * h * wdim + iy * wdim + ix;
                                            let wi = co * wc + ci * ksize * ksize + ky * ksize + kx;
                                            dx[xi] += gval * wv[wi];
                                            dw[wi] += gval * xv[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let dxa = acc(grads, *x, dx.len());
                    for (o, x2) in dxa.iter_mut().zip(dx) {
                        *o += x2;
                    }
                }
                {
                    let dwa = acc(grads, *w, dw.len());
                    for (o, x2) in dwa.iter_mut().zip(dw) {
                        *o += x2;
                    }
                }
            }
            Op::NchwToRows { a, channels, h, w } => {
                let n = self.nodes[*a].rows;
                let c = self.nodes[*a].cols;
                let da = acc(grads, *a, n * c);
                for img in 0..n {
                    for ch in 0..*channels {
                        for p in 0..h * w {
                            da[img * c + ch * h * w + p] += g[(img * h * w + p) * channels + ch];
                        }
                    }
                }
            }
            Op::RowsToNchw { a, channels, h, w } => {
                let rows = self.nodes[*a].rows;
                let da = acc(grads, *a, rows * channels);
                let n = rows / (h * w);
                for img in 0..n {
                    for ch in 0..*channels {
                        for p in 0..h * w {
                            da[(img * h * w + p) * channels + ch] +=
                                g[img * channels * h * w + ch * h * w + p];
                        }
                    }
                }
            }
            Op::BilinearResize {
                a,
                channels,
                h_in,
                w_in,
                h_out,
                w_out,
            } => {
                let n = self.nodes[*a].rows;
                let c_in_len = channels * h_in * w_in;
                let taps_y = resize_taps(*h_in, *h_out);
                let taps_x = resize_taps(*w_in, *w_out);
                let da = acc(grads, *a, n * c_in_len);
                for img in 0..n {
                    for ch in 0..*channels {
                        let ibase = img * c_in_len + ch * h_in * w_in;
                        let obase = (img * channels + ch) * h_out * w_out;
                        for oy in 0..*h_out {
                            let (y0, y1, fy) = taps_y[oy];
                            for ox in 0..*w_out {
                                let (x0, x1, fx) = taps_x[ox];
                                let gval = g[obase + oy * w_out + ox];
                                da[ibase + y0 * w_in + x0] += (1.0 - fy) * (1.0 - fx) * gval;
                                da[ibase + y0 * w_in + x1] += (1.0 - fy) * fx * gval;
                                da[ibase + y1 * w_in + x0] += fy * (1.0 - fx) * gval;
                                da[ibase + y1 * w_in + x1] += fy * fx * gval;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Half-pixel-centered source taps for one output axis: (low index, high
/// index, fraction toward the high index), taps clamped to the valid range.
fn resize_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let lo = (floor.max(0.0) as usize).min(in_len - 1);
            let hi = ((floor + 1.0).max(0.0) as usize).min(in_len - 1);
            (lo, hi, frac)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, rows: usize, cols: usize, v: &[f64]) -> Var {
        tape.leaf(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_values_and_tie_rule() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 3, &[-1.0, 0.0, 2.0]);
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);

        // Gradient: subgradient at exactly 0 is 0.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 3, &[-1.0, 0.0, 2.0]);
        let y = tape.relu(x);
        let ones = leaf(&mut tape, 3, 1, &[1.0, 1.0, 1.0]);
        let s = tape.matmul(y, ones).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn log_softmax_uniform_row() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 8, &[0.3; 8]);
        let y = tape.log_softmax(x);
        for &v in tape.value(y) {
            assert!((v - (-(8f64).ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_mean_values_and_adjoint() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 3, 1, &[2.0, 4.0, 6.0]);
        let y = tape.segment_mean(x, &[0, 0, 1], 2).unwrap();
        assert_eq!(tape.value(y), &[3.0, 6.0]);

        // Weighted sum 1*mean0 + 3*mean1 so the two groups' pulls differ.
        let mut t2 = Tape::new();
        let x2 = leaf(&mut t2, 3, 1, &[2.0, 4.0, 6.0]);
        let y2 = t2.segment_mean(x2, &[0, 0, 1], 2).unwrap();
        let w2 = leaf(&mut t2, 1, 2, &[1.0, 3.0]);
        let s2 = t2.matmul(w2, y2).unwrap();
        let grads = t2.backward(s2).unwrap();
        // d mean0 = 1 spread as 1/2 to rows 0,1; d mean1 = 3 to row 2.
        assert_eq!(grads.get(x2).unwrap(), &[0.5, 0.5, 3.0]);

        // Broadcast-then-mean is the identity on per-segment-constant data.
        let mut t3 = Tape::new();
        let seg_rows = leaf(&mut t3, 2, 1, &[5.0, -1.0]);
        let bc = t3.gather_rows(seg_rows, &[0, 0, 1]).unwrap();
        let back = t3.segment_mean(bc, &[0, 0, 1], 2).unwrap();
        assert_eq!(t3.value(back), t3.value(seg_rows));
    }

    #[test]
    fn segment_mean_rejects_empty_segments() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 2, 1, &[1.0, 2.0]);
        assert!(tape.segment_mean(x, &[0, 2], 3).is_err());
        assert!(tape.segment_mean(x, &[0, 5], 2).is_err());
    }

    #[test]
    fn batch_norm_two_rows() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 2, 1, &[0.0, 2.0]);
        let gamma = leaf(&mut tape, 1, 1, &[1.0]);
        let beta = leaf(&mut tape, 1, 1, &[0.0]);
        let y = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        let want = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert!((tape.value(y)[0] + want).abs() < 1e-12);
        assert!((tape.value(y)[1] - want).abs() < 1e-12);
        // Within the documented tolerance of the idealized [-1, 1].
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-4);
        let (mean, var) = tape.batch_stats(y).unwrap();
        assert_eq!(mean, &[1.0]);
        assert_eq!(var, &[1.0]);
    }

    #[test]
    fn batch_norm_standardizes_columns() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..40)
            .map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0)
            .collect();
        let x = tape.leaf(10, 4, vals).unwrap();
        let gamma = leaf(&mut tape, 1, 4, &[1.0; 4]);
        let beta = leaf(&mut tape, 1, 4, &[0.0; 4]);
        let y = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        let out = tape.value(y);
        for j in 0..4 {
            let col: Vec<f64> = (0..10).map(|i| out[i * 4 + j]).collect();
            let mean = col.iter().sum::<f64>() / 10.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_gamma_zero_broadcasts_beta() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 3, 2, &[0.1, 5.0, -2.0, 3.0, 0.7, 1.0]);
        let gamma = leaf(&mut tape, 1, 2, &[0.0, 0.0]);
        let beta = leaf(&mut tape, 1, 2, &[4.0, -1.5]);
        let y = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[4.0, -1.5, 4.0, -1.5, 4.0, -1.5]);
    }

    #[test]
    fn batch_norm_rejects_single_row_training() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 2, &[0.1, 5.0]);
        let gamma = leaf(&mut tape, 1, 2, &[1.0, 1.0]);
        let beta = leaf(&mut tape, 1, 2, &[0.0, 0.0]);
        assert!(tape.batch_norm_train(x, gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let x = tape.leaf(1, 16, vals.clone()).unwrap();
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let w = tape.leaf(1, 9, kernel).unwrap();
        let y = tape.conv2d(x, w, 1, 4, 4, 3).unwrap();
        assert_eq!(tape.value(y), &vals[..]);
    }

    #[test]
    fn conv_ones_kernel_sums_interior_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 16, vec![1.0; 16]).unwrap();
        let w = tape.leaf(1, 9, vec![1.0; 9]).unwrap();
        let y = tape.conv2d(x, w, 1, 4, 4, 3).unwrap();
        // Interior pixel (1,1) sees the full 3x3 window; corner (0,0) only 4.
        assert_eq!(tape.value(y)[5], 9.0);
        assert_eq!(tape.value(y)[0], 4.0);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        // Independent 6-loop reference on a random 1x4x4 input, 2 kernels.
        let mut state = 0x9E3779B97F4A7C15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let xv: Vec<f64> = (0..16).map(|_| next()).collect();
        let wv: Vec<f64> = (0..18).map(|_| next()).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(1, 16, xv.clone()).unwrap();
        let w = tape.leaf(2, 9, wv.clone()).unwrap();
        let y = tape.conv2d(x, w, 1, 4, 4, 3).unwrap();
        for co in 0..2 {
            for oy in 0..4i64 {
                for ox in 0..4i64 {
                    let mut want = 0.0;
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let iy = oy + ky - 1;
                            let ix = ox + kx - 1;
                            if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                want += xv[(iy * 4 + ix) as usize]
                                    * wv[co * 9 + (ky * 3 + kx) as usize];
                            }
                        }
                    }
                    let got = tape.value(y)[co * 16 + (oy * 4 + ox) as usize];
                    assert!((got - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let x = tape.leaf(1, 12, vals.clone()).unwrap();
        let same = tape.bilinear_resize(x, 1, 3, 4, 3, 4).unwrap();
        assert_eq!(tape.value(same), &vals[..]);

        let c = tape.leaf(1, 4, vec![0.7; 4]).unwrap();
        let big = tape.bilinear_resize(c, 1, 2, 2, 5, 7).unwrap();
        assert!(tape.value(big).iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn bilinear_two_by_two_to_two_by_four() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 4, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = tape.bilinear_resize(x, 1, 2, 2, 2, 4).unwrap();
        let want = [0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0];
        for (got, want) in tape.value(y).iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn nchw_row_permutation_roundtrips() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64).collect();
        let x = tape.leaf(2, 12, vals.clone()).unwrap(); // 2 images, 3 ch, 2x2
        let rows = tape.nchw_to_rows(x, 3, 2, 2).unwrap();
        assert_eq!(tape.shape(rows), (8, 3));
        // First pixel of first image carries channels (0, 4, 8).
        assert_eq!(&tape.value(rows)[0..3], &[0.0, 4.0, 8.0]);
        let back = tape.rows_to_nchw(rows, 3, 2, 2).unwrap();
        assert_eq!(tape.value(back), &vals[..]);
    }

    #[test]
    fn shape_errors_are_validation_errors() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 2, 3, &[0.0; 6]);
        let b = leaf(&mut tape, 2, 3, &[0.0; 6]);
        assert!(matches!(tape.matmul(a, b), Err(Error::Validation(_))));
        assert!(matches!(
            tape.gather_rows(a, &[7]),
            Err(Error::Validation(_))
        ));
    }

    /// Central finite differences on a freshly rebuilt scalar function.
    fn fd_check(build: impl Fn(&mut Tape, &[f64]) -> Var, x0: &[f64]) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, x0);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads
            .get(Var(0))
            .expect("input must influence loss")
            .to_vec();
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut plus = x0.to_vec();
            plus[i] += h;
            let mut minus = x0.to_vec();
            minus[i] -= h;
            let mut tp = Tape::new();
            let lp = build(&mut tp, &plus);
            let fp = tp.value(lp)[0];
            let mut tm = Tape::new();
            let lm = build(&mut tm, &minus);
            let fm = tm.value(lm)[0];
            let fd = (fp - fm) / (2.0 * h);
            let denom = 1f64.max(analytic[i].abs()).max(fd.abs());
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-4,
                "component {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn smoke_gradients_match_finite_differences() {
        // log-softmax + nll through a matmul.
        fd_check(
            |tape, x| {
                let v = tape.leaf(2, 3, x.to_vec()).unwrap();
                let w = tape
                    .leaf(3, 2, vec![0.3, -0.2, 0.5, 0.8, -0.7, 0.1])
                    .unwrap();
                let z = tape.matmul(v, w).unwrap();
                let ls = tape.log_softmax(z);
                tape.nll_mean(ls, &[0, 1]).unwrap()
            },
            &[0.5, -0.3, 0.8, 0.2, 0.9, -0.6],
        );

        // batch norm into a weighted sum.
        fd_check(
            |tape, x| {
                let v = tape.leaf(4, 2, x.to_vec()).unwrap();
                let gamma = tape.leaf(1, 2, vec![1.3, 0.7]).unwrap();
                let beta = tape.leaf(1, 2, vec![0.1, -0.2]).unwrap();
                let y = tape.batch_norm_train(v, gamma, beta, 1e-5).unwrap();
                let w = tape.leaf(2, 1, vec![0.4, -1.1]).unwrap();
                let z = tape.matmul(y, w).unwrap();
                let picker = tape.leaf(1, 4, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
                tape.matmul(picker, z).unwrap()
            },
            &[0.5, -0.3, 0.8, 0.2, 0.9, -0.6, -0.4, 1.2],
        );

        // bilinear resize to a bigger grid then sum.
        fd_check(
            |tape, x| {
                let v = tape.leaf(1, 4, x.to_vec()).unwrap();
                let y = tape.bilinear_resize(v, 1, 2, 2, 3, 5).unwrap();
                let w = tape
                    .leaf(15, 1, (0..15).map(|i| 0.1 * i as f64).collect())
                    .unwrap();
                tape.matmul(y, w).unwrap()
            },
            &[0.5, -0.3, 0.8, 0.2],
        );
    }
}
