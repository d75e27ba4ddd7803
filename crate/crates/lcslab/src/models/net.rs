//! Forward-pass builder: binds stored parameters to tape leaves and
//! assembles linear, normalization, and graph-convolution layers.

use std::collections::BTreeMap;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::graph::Adjacency;
use crate::{Error, Result};

use super::GraphConvKind;

/// Epsilon inside the normalization denominator.
pub const BN_EPSILON: f64 = 1e-5;
/// Negative slope of the attention score activation.
pub const ATTENTION_LEAKY_SLOPE: f64 = 0.2;

/// A tape plus lazily bound parameters from a [`ParamStore`]. Layers built
/// through this struct record which parameters they read (for gradient
/// routing), which batch-norm nodes they created (for running-statistic
/// updates), and any attention coefficients (for inspection).
pub struct Net<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bindings: BTreeMap<String, Var>,
    bn_nodes: Vec<(String, Var)>,
    attention: Vec<Var>,
    training: bool,
}

impl<'a> Net<'a> {
    pub fn new(store: &'a ParamStore, training: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bindings: BTreeMap::new(),
            bn_nodes: Vec::new(),
            attention: Vec::new(),
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Bind a stored parameter as a tape leaf (cached per name).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bindings.get(name) {
            return Ok(v);
        }
        let (rows, cols) = self
            .store
            .shape(name)
            .ok_or_else(|| Error::validation(format!("unknown parameter '{name}'")))?;
        let values = self.store.values(name).unwrap().to_vec();
        let var = self.tape.leaf(rows, cols, values)?;
        self.bindings.insert(name.to_string(), var);
        Ok(var)
    }

    /// `x W + b` with parameters `{prefix}weight` / `{prefix}bias`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}weight"))?;
        let b = self.param(&format!("{prefix}bias"))?;
        let xw = self.tape.matmul(x, w)?;
        self.tape.add_bias(xw, b)
    }

    /// Batch normalization over rows. Training mode standardizes with batch
    /// statistics (recorded for the running-average update); evaluation mode
    /// uses the stored running statistics.
    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}bn.gamma"))?;
        let beta = self.param(&format!("{prefix}bn.beta"))?;
        if self.training {
            let out = self.tape.batch_norm_train(x, gamma, beta, BN_EPSILON)?;
            self.bn_nodes.push((prefix.to_string(), out));
            Ok(out)
        } else {
            let mean_name = format!("{prefix}bn.running_mean");
            let var_name = format!("{prefix}bn.running_var");
            let mean = self
                .store
                .values(&mean_name)
                .ok_or_else(|| Error::validation(format!("unknown parameter '{mean_name}'")))?
                .to_vec();
            let var = self
                .store
                .values(&var_name)
                .ok_or_else(|| Error::validation(format!("unknown parameter '{var_name}'")))?
                .to_vec();
            self.tape
                .affine_norm(x, gamma, beta, &mean, &var, BN_EPSILON)
        }
    }

    /// One message-passing layer of the selected kind.
    pub fn graph_conv(
        &mut self,
        kind: GraphConvKind,
        prefix: &str,
        x: Var,
        adj: &Adjacency,
        heads: usize,
    ) -> Result<Var> {
        require_self_loops(adj)?;
        let (rows, _) = self.tape.shape(x);
        if rows != adj.num_nodes() {
            return Err(Error::validation(format!(
                "feature rows {rows} do not match {} graph nodes",
                adj.num_nodes()
            )));
        }
        match kind {
            GraphConvKind::Gcn => self.gcn_conv(prefix, x, adj),
            GraphConvKind::Sage => self.sage_conv(prefix, x, adj),
            GraphConvKind::Gat => self.gat_conv(prefix, x, adj, heads),
            GraphConvKind::Gt => self.gt_conv(prefix, x, adj, heads),
        }
    }

    /// Symmetric-normalized propagation: for edge (i, j) the coefficient is
    /// 1 / sqrt(deg(i) deg(j)) with closed (self-loop counting) degrees.
    fn gcn_conv(&mut self, prefix: &str, x: Var, adj: &Adjacency) -> Result<Var> {
        let w = self.param(&format!("{prefix}weight"))?;
        let b = self.param(&format!("{prefix}bias"))?;
        let xw = self.tape.matmul(x, w)?;
        let mut coefs = Vec::with_capacity(adj.num_directed_edges());
        for dst in 0..adj.num_nodes() {
            let dd = adj.degree(dst) as f64;
            for &src in adj.neighbors(dst) {
                let ds = adj.degree(src as usize) as f64;
                coefs.push(1.0 / (dd * ds).sqrt());
            }
        }
        let propagated = self
            .tape
            .spmm_const(xw, adj.offsets(), adj.sources(), &coefs)?;
        self.tape.add_bias(propagated, b)
    }

    /// Self transform plus mean over proper (non-self) neighbors. Isolated
    /// nodes contribute a zero neighbor term.
    fn sage_conv(&mut self, prefix: &str, x: Var, adj: &Adjacency) -> Result<Var> {
        let w_self = self.param(&format!("{prefix}self_weight"))?;
        let w_neigh = self.param(&format!("{prefix}neigh_weight"))?;
        let b = self.param(&format!("{prefix}bias"))?;
        let self_term = self.tape.matmul(x, w_self)?;
        let mut offsets = Vec::with_capacity(adj.num_nodes() + 1);
        let mut sources = Vec::new();
        let mut coefs = Vec::new();
        offsets.push(0);
        for dst in 0..adj.num_nodes() {
            let proper: Vec<u32> = adj
                .neighbors(dst)
                .iter()
                .copied()
                .filter(|&s| s as usize != dst)
                .collect();
            let inv = if proper.is_empty() {
                0.0
            } else {
                1.0 / proper.len() as f64
            };
            for s in proper {
                sources.push(s);
                coefs.push(inv);
            }
            offsets.push(sources.len());
        }
        let mean = self.tape.spmm_const(x, &offsets, &sources, &coefs)?;
        let neigh_term = self.tape.matmul(mean, w_neigh)?;
        let sum = self.tape.add(self_term, neigh_term)?;
        self.tape.add_bias(sum, b)
    }

    /// Additive attention over the closed neighborhood. Scores come from two
    /// per-head dot products (destination and source), pass through a leaky
    /// ReLU, and normalize per destination. No bias term.
    fn gat_conv(&mut self, prefix: &str, x: Var, adj: &Adjacency, heads: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}weight"))?;
        let a_self = self.param(&format!("{prefix}att_self"))?;
        let a_neigh = self.param(&format!("{prefix}att_neigh"))?;
        let xw = self.tape.matmul(x, w)?;
        let s_self = self.tape.head_dot(xw, a_self, heads)?;
        let s_neigh = self.tape.head_dot(xw, a_neigh, heads)?;
        let dsts = expand_destinations(adj);
        let e_self = self.tape.gather_rows(s_self, &dsts)?;
        let e_neigh = self.tape.gather_rows(s_neigh, adj.sources())?;
        let raw = self.tape.add(e_self, e_neigh)?;
        let scores = self.tape.leaky_relu(raw, ATTENTION_LEAKY_SLOPE);
        let alpha = self.tape.edge_softmax(scores, adj.offsets())?;
        self.attention.push(alpha);
        self.tape
            .head_weighted_scatter(alpha, xw, adj.offsets(), adj.sources(), heads)
    }

    /// Scaled dot-product attention over the closed neighborhood plus a root
    /// (self) transform. No bias term.
    fn gt_conv(&mut self, prefix: &str, x: Var, adj: &Adjacency, heads: usize) -> Result<Var> {
        let w_root = self.param(&format!("{prefix}root_weight"))?;
        let w_qry = self.param(&format!("{prefix}qry_weight"))?;
        let w_key = self.param(&format!("{prefix}key_weight"))?;
        let w_val = self.param(&format!("{prefix}val_weight"))?;
        let q = self.tape.matmul(x, w_qry)?;
        let k = self.tape.matmul(x, w_key)?;
        let v = self.tape.matmul(x, w_val)?;
        let (_, width) = self.tape.shape(v);
        if width % heads != 0 {
            return Err(Error::validation(format!(
                "layer width {width} not divisible by {heads} heads"
            )));
        }
        let scale = 1.0 / ((width / heads) as f64).sqrt();
        let scores = self
            .tape
            .edge_dot_heads(q, k, adj.offsets(), adj.sources(), heads, scale)?;
        let alpha = self.tape.edge_softmax(scores, adj.offsets())?;
        self.attention.push(alpha);
        let attn =
            self.tape
                .head_weighted_scatter(alpha, v, adj.offsets(), adj.sources(), heads)?;
        let root = self.tape.matmul(x, w_root)?;
        self.tape.add(root, attn)
    }

    pub fn bindings(&self) -> &BTreeMap<String, Var> {
        &self.bindings
    }

    pub fn attention(&self) -> &[Var] {
        &self.attention
    }

    pub fn bn_nodes(&self) -> &[(String, Var)] {
        &self.bn_nodes
    }

    pub fn finish(self) -> NetParts {
        (self.tape, self.bindings, self.bn_nodes, self.attention)
    }
}

/// What a finished [`Net`] decomposes into: the tape, the parameter-name
/// bindings, the batch-norm output nodes, and the attention coefficients.
pub type NetParts = (Tape, BTreeMap<String, Var>, Vec<(String, Var)>, Vec<Var>);

/// Destination node id of every directed edge, in CSR order.
pub(crate) fn expand_destinations(adj: &Adjacency) -> Vec<u32> {
    let mut dsts = Vec::with_capacity(adj.num_directed_edges());
    for dst in 0..adj.num_nodes() {
        dsts.extend(std::iter::repeat_n(dst as u32, adj.degree(dst)));
    }
    dsts
}

fn require_self_loops(adj: &Adjacency) -> Result<()> {
    for node in 0..adj.num_nodes() {
        if adj.neighbors(node).binary_search(&(node as u32)).is_err() {
            return Err(Error::validation(format!(
                "node {node} is missing its self-loop"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;

    fn store_with(entries: &[(&str, usize, usize, Vec<f64>)]) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, rows, cols, values) in entries {
            store
                .insert(name, *rows, *cols, values.clone(), true)
                .unwrap();
        }
        store
    }

    fn identity(n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        v
    }

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "index {i}: actual {a} vs expected {e}"
            );
        }
    }

    #[test]
    fn gcn_two_connected_nodes_average() {
        let store = store_with(&[
            ("c.weight", 2, 2, identity(2)),
            ("c.bias", 1, 2, vec![0.0, 0.0]),
        ]);
        let mut net = Net::new(&store, true);
        let x = net.tape.leaf(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let adj = Adjacency::from_pairs(2, [(0, 1)]);
        let out = net
            .graph_conv(GraphConvKind::Gcn, "c.", x, &adj, 1)
            .unwrap();
        // Both closed degrees are 2, so every coefficient is 1/2 and each row
        // becomes the average of the two feature rows.
        assert_close(net.tape.value(out), &[0.5, 0.5, 0.5, 0.5], 1e-12);
    }

    #[test]
    fn gcn_isolated_node_passes_through() {
        let store = store_with(&[
            ("c.weight", 3, 3, identity(3)),
            ("c.bias", 1, 3, vec![0.0; 3]),
        ]);
        let mut net = Net::new(&store, true);
        let x = net.tape.leaf(1, 3, vec![0.2, -0.4, 1.5]).unwrap();
        let adj = Adjacency::from_pairs(1, []);
        let out = net
            .graph_conv(GraphConvKind::Gcn, "c.", x, &adj, 1)
            .unwrap();
        assert_close(net.tape.value(out), &[0.2, -0.4, 1.5], 1e-12);
    }

    #[test]
    fn gcn_zero_input_yields_bias() {
        let store = store_with(&[
            ("c.weight", 2, 2, vec![0.3, -0.7, 0.9, 0.1]),
            ("c.bias", 1, 2, vec![0.25, -1.5]),
        ]);
        let mut net = Net::new(&store, true);
        let x = net.tape.leaf(3, 2, vec![0.0; 6]).unwrap();
        let adj = Adjacency::from_pairs(3, [(0, 1), (1, 2)]);
        let out = net
            .graph_conv(GraphConvKind::Gcn, "c.", x, &adj, 1)
            .unwrap();
        assert_close(
            net.tape.value(out),
            &[0.25, -1.5, 0.25, -1.5, 0.25, -1.5],
            1e-12,
        );
    }

    #[test]
    fn sage_isolated_node_is_self_affine() {
        let store = store_with(&[
            ("c.self_weight", 2, 2, vec![2.0, 0.0, 0.0, 3.0]),
            ("c.neigh_weight", 2, 2, vec![100.0; 4]),
            ("c.bias", 1, 2, vec![1.0, -1.0]),
        ]);
        let mut net = Net::new(&store, true);
        let x = net.tape.leaf(1, 2, vec![0.5, 0.5]).unwrap();
        let adj = Adjacency::from_pairs(1, []);
        let out = net
            .graph_conv(GraphConvKind::Sage, "c.", x, &adj, 1)
            .unwrap();
        // No proper neighbors, so the neighbor term is zero.
        assert_close(net.tape.value(out), &[2.0, 0.5], 1e-12);
    }

    #[test]
    fn sage_path_takes_neighbor_mean() {
        let store = store_with(&[
            ("c.self_weight", 1, 1, vec![0.0]),
            ("c.neigh_weight", 1, 1, vec![1.0]),
            ("c.bias", 1, 1, vec![0.0]),
        ]);
        let mut net = Net::new(&store, true);
        let x = net.tape.leaf(3, 1, vec![1.0, 10.0, 4.0]).unwrap();
        let adj = Adjacency::from_pairs(3, [(0, 1), (1, 2)]);
        let out = net
            .graph_conv(GraphConvKind::Sage, "c.", x, &adj, 1)
            .unwrap();
        // Ends see their single neighbor; the middle sees the mean of both.
        assert_close(net.tape.value(out), &[10.0, 2.5, 10.0], 1e-12);
    }

    #[test]
    fn gat_zero_attention_is_uniform_average() {
        let store = store_with(&[
            ("c.weight", 2, 2, identity(2)),
            ("c.att_self", 1, 2, vec![0.0, 0.0]),
            ("c.att_neigh", 1, 2, vec![0.0, 0.0]),
        ]);
        let mut net = Net::new(&store, true);
        let x = net
            .tape
            .leaf(3, 2, vec![3.0, 0.0, 0.0, 6.0, 3.0, 3.0])
            .unwrap();
        let adj = Adjacency::from_pairs(3, [(0, 1), (1, 2)]);
        let out = net
            .graph_conv(GraphConvKind::Gat, "c.", x, &adj, 1)
            .unwrap();
        // All scores are zero, so attention is uniform over the closed
        // neighborhood: node 0 averages {0, 1}, node 1 averages {0, 1, 2}.
        assert_close(net.tape.value(out), &[1.5, 3.0, 2.0, 3.0, 1.5, 4.5], 1e-12);
        let alpha = net.attention()[0];
        assert_close(
            net.tape.value(alpha),
            &[0.5, 0.5, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.5, 0.5],
            1e-12,
        );
    }

    #[test]
    fn gat_two_nodes_match_hand_softmax() {
        let store = store_with(&[
            ("c.weight", 1, 1, vec![1.0]),
            ("c.att_self", 1, 1, vec![0.5]),
            ("c.att_neigh", 1, 1, vec![0.25]),
        ]);
        let mut net = Net::new(&store, true);
        let x = net.tape.leaf(2, 1, vec![1.0, 2.0]).unwrap();
        let adj = Adjacency::from_pairs(2, [(0, 1)]);
        let out = net
            .graph_conv(GraphConvKind::Gat, "c.", x, &adj, 1)
            .unwrap();

        let leaky = |v: f64| {
            if v > 0.0 {
                v
            } else {
                ATTENTION_LEAKY_SLOPE * v
            }
        };
        let expected: Vec<f64> = (0..2)
            .map(|dst| {
                let xs = [1.0, 2.0];
                let scores: Vec<f64> = (0..2)
                    .map(|src| leaky(0.5 * xs[dst] + 0.25 * xs[src]))
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                (0..2)
                    .map(|src| (scores[src] - max).exp() / z * xs[src])
                    .sum()
            })
            .collect();
        assert_close(net.tape.value(out), &expected, 1e-12);
    }

    #[test]
    fn gat_negative_scores_pass_through_leaky_slope() {
        let store = store_with(&[
            ("c.weight", 1, 1, vec![1.0]),
            ("c.att_self", 1, 1, vec![-1.0]),
            ("c.att_neigh", 1, 1, vec![-0.5]),
        ]);
        let mut net = Net::new(&store, true);
        let x = net.tape.leaf(2, 1, vec![1.0, 3.0]).unwrap();
        let adj = Adjacency::from_pairs(2, [(0, 1)]);
        let out = net
            .graph_conv(GraphConvKind::Gat, "c.", x, &adj, 1)
            .unwrap();

        let leaky = |v: f64| {
            if v > 0.0 {
                v
            } else {
                ATTENTION_LEAKY_SLOPE * v
            }
        };
        let xs = [1.0, 3.0];
        let expected: Vec<f64> = (0..2)
            .map(|dst| {
                let scores: Vec<f64> = (0..2).map(|src| leaky(-xs[dst] - 0.5 * xs[src])).collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                (0..2)
                    .map(|src| (scores[src] - max).exp() / z * xs[src])
                    .sum()
            })
            .collect();
        assert_close(net.tape.value(out), &expected, 1e-12);
    }

    #[test]
    fn gt_isolated_node_is_root_plus_value() {
        let store = store_with(&[
            ("c.root_weight", 2, 2, vec![1.0, 2.0, 3.0, 4.0]),
            ("c.qry_weight", 2, 2, vec![0.7, -0.3, 0.2, 0.9]),
            ("c.key_weight", 2, 2, vec![-0.5, 0.1, 0.8, 0.4]),
            ("c.val_weight", 2, 2, vec![5.0, 6.0, 7.0, 8.0]),
        ]);
        let mut net = Net::new(&store, true);
        let x = net.tape.leaf(1, 2, vec![1.0, -1.0]).unwrap();
        let adj = Adjacency::from_pairs(1, []);
        let out = net.graph_conv(GraphConvKind::Gt, "c.", x, &adj, 2).unwrap();
        // The only neighbor is the node itself, so attention is 1 and the
        // output is x (W_root + W_val) whatever the query/key weights are.
        let expected = [
            1.0 * (1.0 + 5.0) + -(3.0 + 7.0),
            1.0 * (2.0 + 6.0) + -(4.0 + 8.0),
        ];
        assert_close(net.tape.value(out), &expected, 1e-12);
    }

    #[test]
    fn gt_zero_query_attends_uniformly() {
        let store = store_with(&[
            ("c.root_weight", 1, 1, vec![0.0]),
            ("c.qry_weight", 1, 1, vec![0.0]),
            ("c.key_weight", 1, 1, vec![1.0]),
            ("c.val_weight", 1, 1, vec![1.0]),
        ]);
        let mut net = Net::new(&store, true);
        let x = net.tape.leaf(3, 1, vec![3.0, 9.0, 6.0]).unwrap();
        let adj = Adjacency::from_pairs(3, [(0, 1), (1, 2)]);
        let out = net.graph_conv(GraphConvKind::Gt, "c.", x, &adj, 1).unwrap();
        // Zero queries give zero scores, hence a uniform average of values
        // over the closed neighborhood.
        assert_close(net.tape.value(out), &[6.0, 6.0, 7.5], 1e-12);
    }

    #[test]
    fn gt_star_matches_scalar_reference() {
        let (wq, wk, wv, wr) = (0.8, -0.6, 1.3, 0.4);
        let store = store_with(&[
            ("c.root_weight", 1, 1, vec![wr]),
            ("c.qry_weight", 1, 1, vec![wq]),
            ("c.key_weight", 1, 1, vec![wk]),
            ("c.val_weight", 1, 1, vec![wv]),
        ]);
        let xs = [2.0, -1.0, 0.5, 1.5];
        let mut net = Net::new(&store, true);
        let x = net.tape.leaf(4, 1, xs.to_vec()).unwrap();
        let adj = Adjacency::from_pairs(4, [(0, 1), (0, 2), (0, 3)]);
        let out = net.graph_conv(GraphConvKind::Gt, "c.", x, &adj, 1).unwrap();

        let expected: Vec<f64> = (0..4usize)
            .map(|dst| {
                let mut neigh: Vec<usize> = if dst == 0 {
                    vec![0, 1, 2, 3]
                } else {
                    vec![0, dst]
                };
                neigh.sort_unstable();
                let scores: Vec<f64> = neigh
                    .iter()
                    .map(|&s| (wq * xs[dst]) * (wk * xs[s]))
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                let attn: f64 = neigh
                    .iter()
                    .zip(&scores)
                    .map(|(&s, sc)| (sc - max).exp() / z * (wv * xs[s]))
                    .sum();
                wr * xs[dst] + attn
            })
            .collect();
        assert_close(net.tape.value(out), &expected, 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let heads = 2;
        let store = store_with(&[
            (
                "g.weight",
                3,
                4,
                (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ),
            (
                "g.att_self",
                heads,
                2,
                (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ),
            (
                "g.att_neigh",
                heads,
                2,
                (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ),
            (
                "t.root_weight",
                3,
                4,
                (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ),
            (
                "t.qry_weight",
                3,
                4,
                (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ),
            (
                "t.key_weight",
                3,
                4,
                (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ),
            (
                "t.val_weight",
                3,
                4,
                (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ),
        ]);
        let adj = Adjacency::from_pairs(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]);
        let mut net = Net::new(&store, true);
        let features: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = net.tape.leaf(5, 3, features).unwrap();
        net.graph_conv(GraphConvKind::Gat, "g.", x, &adj, heads)
            .unwrap();
        net.graph_conv(GraphConvKind::Gt, "t.", x, &adj, heads)
            .unwrap();
        assert_eq!(net.attention().len(), 2);
        for &alpha in net.attention() {
            let (rows, cols) = net.tape.shape(alpha);
            assert_eq!(rows, adj.num_directed_edges());
            assert_eq!(cols, heads);
            let values = net.tape.value(alpha);
            for h in 0..cols {
                for dst in 0..adj.num_nodes() {
                    let sum: f64 = (adj.offsets()[dst]..adj.offsets()[dst + 1])
                        .map(|e| values[e * cols + h])
                        .sum();
                    assert!((sum - 1.0).abs() < 1e-12, "head {h} node {dst}: {sum}");
                }
            }
        }
    }

    #[test]
    fn missing_parameter_is_reported_by_name() {
        let store = ParamStore::new();
        let mut net = Net::new(&store, true);
        let err = net.param("layer0.weight").unwrap_err();
        assert!(err.to_string().contains("layer0.weight"));
    }

    #[test]
    fn eval_batch_norm_uses_running_statistics() {
        let mut store = ParamStore::new();
        store
            .insert("l.bn.gamma", 1, 2, vec![2.0, 1.0], true)
            .unwrap();
        store
            .insert("l.bn.beta", 1, 2, vec![0.5, 0.0], true)
            .unwrap();
        store
            .insert("l.bn.running_mean", 1, 2, vec![1.0, -1.0], false)
            .unwrap();
        store
            .insert("l.bn.running_var", 1, 2, vec![4.0, 1.0], false)
            .unwrap();
        let mut net = Net::new(&store, false);
        let x = net.tape.leaf(1, 2, vec![3.0, 0.0]).unwrap();
        let out = net.batch_norm("l.", x).unwrap();
        let e0 = 2.0 * (3.0 - 1.0) / (4.0 + BN_EPSILON).sqrt() + 0.5;
        let e1 = (0.0 - (-1.0)) / (1.0 + BN_EPSILON).sqrt();
        assert_close(net.tape.value(out), &[e0, e1], 1e-12);
        assert!(net.bn_nodes().is_empty());
    }

    #[test]
    fn train_batch_norm_records_update_nodes() {
        let mut store = ParamStore::new();
        store.insert("l.bn.gamma", 1, 1, vec![1.0], true).unwrap();
        store.insert("l.bn.beta", 1, 1, vec![0.0], true).unwrap();
        let mut net = Net::new(&store, true);
        let x = net.tape.leaf(2, 1, vec![0.0, 2.0]).unwrap();
        let out = net.batch_norm("l.", x).unwrap();
        assert_eq!(net.bn_nodes(), &[("l.".to_string(), out)]);
        let (mean, var) = net.tape.batch_stats(out).unwrap();
        assert_close(mean, &[1.0], 1e-12);
        assert_close(var, &[1.0], 1e-12);
    }

    #[test]
    fn self_loops_are_required() {
        // Hand-build an adjacency bypassing from_pairs is not possible from
        // outside, so check the guard via feature-row mismatch instead and
        // the loop presence on a valid graph.
        let adj = Adjacency::from_pairs(2, [(0, 1)]);
        assert!(require_self_loops(&adj).is_ok());
        let store = store_with(&[
            ("c.weight", 2, 2, identity(2)),
            ("c.bias", 1, 2, vec![0.0, 0.0]),
        ]);
        let mut net = Net::new(&store, true);
        let x = net.tape.leaf(3, 2, vec![0.0; 6]).unwrap();
        let err = net
            .graph_conv(GraphConvKind::Gcn, "c.", x, &adj, 1)
            .unwrap_err();
        assert!(err.to_string().contains("nodes"));
    }
}
