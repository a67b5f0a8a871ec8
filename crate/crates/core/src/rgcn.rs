//! Relational graph convolution: per-relation message passing, gated node
//! updates, and optional query-aware gating.

use crate::error::{GraphError, NumError, Result};
use crate::graph::{RelGraph, Relation};
use crate::num::{BoundParams, Init, Registry, Tape, Tensor, Var};

/// Incoming-neighbor lists per relation, plus the derived row-normalized
/// adjacency used by the dense message kernel. Lists may contain the same
/// neighbor more than once; normalization counts occurrences.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    n: usize,
    relations: Vec<Relation>,
    incoming: Vec<Vec<Vec<usize>>>,
}

impl NeighborIndex {
    pub fn from_edges(
        n: usize,
        relations: &[Relation],
        edges: &[(usize, usize, Relation)],
    ) -> Result<NeighborIndex, GraphError> {
        let mut incoming = vec![vec![Vec::new(); n]; relations.len()];
        for &(src, dst, rel) in edges {
            if src >= n || dst >= n {
                return Err(GraphError::EdgeOutOfRange {
                    index: src.max(dst),
                    n_nodes: n,
                });
            }
            if let Some(ri) = relations.iter().position(|&r| r == rel) {
                incoming[ri][dst].push(src);
            }
        }
        Ok(NeighborIndex {
            n,
            relations: relations.to_vec(),
            incoming,
        })
    }

    /// Index a built graph. Edges outside `relations` are ignored, so a
    /// model can run on a narrower relation set than the graph carries.
    pub fn from_graph(
        graph: &RelGraph,
        relations: &[Relation],
    ) -> Result<NeighborIndex, GraphError> {
        let edges: Vec<(usize, usize, Relation)> =
            graph.edges.iter().map(|e| (e.src, e.dst, e.rel)).collect();
        NeighborIndex::from_edges(graph.nodes.len(), relations, &edges)
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn incoming(&self, relation: usize, node: usize) -> &[usize] {
        &self.incoming[relation][node]
    }

    /// Row-normalized adjacency for one relation: entry (i, j) accumulates
    /// 1/|N_i^r| once per occurrence of j in node i's incoming list.
    pub fn adjacency(&self, relation: usize) -> Tensor {
        let mut a = Tensor::zeros(&[self.n, self.n]);
        for i in 0..self.n {
            let list = &self.incoming[relation][i];
            if list.is_empty() {
                continue;
            }
            let w = 1.0 / list.len() as f64;
            for &j in list {
                a.set2(i, j, a.at2(i, j) + w);
            }
        }
        a
    }
}

/// One convolution layer. Parameters live in a shared registry under
/// `<prefix>/...`; the layer itself only remembers names and sizes.
#[derive(Debug, Clone)]
pub struct RgcnLayer {
    prefix: String,
    d: usize,
    n_relations: usize,
    query_aware: bool,
}

impl RgcnLayer {
    pub fn declare(
        reg: &mut Registry,
        prefix: &str,
        d: usize,
        n_relations: usize,
        query_aware: bool,
    ) -> RgcnLayer {
        for r in 0..n_relations {
            reg.declare(format!("{prefix}/rel{r}.w"), &[d, d], Init::Glorot);
        }
        reg.declare(format!("{prefix}/self.w"), &[d, d], Init::Glorot);
        reg.declare(format!("{prefix}/gate.w"), &[2 * d, d], Init::Glorot);
        reg.declare(format!("{prefix}/gate.b"), &[1, d], Init::Zeros);
        if query_aware {
            reg.declare(format!("{prefix}/qatt.w"), &[2 * d, d], Init::Glorot);
            reg.declare(format!("{prefix}/qatt.b"), &[1, d], Init::Zeros);
            reg.declare(format!("{prefix}/qgate.w"), &[2 * d, d], Init::Glorot);
            reg.declare(format!("{prefix}/qgate.b"), &[1, d], Init::Zeros);
        }
        RgcnLayer {
            prefix: prefix.to_string(),
            d,
            n_relations,
            query_aware,
        }
    }

    fn p(&self, params: &BoundParams, name: &str) -> Result<Var, NumError> {
        params.var(&format!("{}/{}", self.prefix, name))
    }

    /// Relation-summed, degree-normalized neighbor transform: row i is
    /// sum_r sum_{j in N_i^r} (1/|N_i^r|) W_r h_j.
    pub fn message(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        h: Var,
        index: &NeighborIndex,
    ) -> Result<Var, NumError> {
        let n = index.n_nodes();
        let mut acc = tape.leaf(Tensor::zeros(&[n, self.d]))?;
        for r in 0..self.n_relations {
            let w = self.p(params, &format!("rel{r}.w"))?;
            let transformed = tape.matmul(h, w)?;
            let adj = tape.leaf(index.adjacency(r))?;
            let term = tape.matmul(adj, transformed)?;
            acc = tape.add(acc, term)?;
        }
        Ok(acc)
    }

    /// u = W_u h + m.
    pub fn update(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        h: Var,
        m: Var,
    ) -> Result<Var, NumError> {
        let w = self.p(params, "self.w")?;
        let own = tape.matmul(h, w)?;
        tape.add(own, m)
    }

    /// Attention over query tokens, blended into the update:
    /// per token j, s_j = sigmoid(u W_qu + p_j W_qp + b); attention over
    /// tokens normalizes exp(s_j) per node and dimension; the summary
    /// q = sum_j alpha_j * p_j enters through a second sigmoid gate.
    pub fn query_gate(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        u: Var,
        p: Var,
    ) -> Result<Var, NumError> {
        let m = tape.value(p)?.dims2()?.0;
        if m == 0 {
            return Err(NumError::Empty { op: "query_gate" });
        }
        let wq = self.p(params, "qatt.w")?;
        let bq = self.p(params, "qatt.b")?;
        // Split the 2d-by-d weight into the halves applied to u and p.
        let wq_t = tape.transpose(wq)?;
        let top = tape.slice_cols(wq_t, 0, self.d)?;
        let bottom = tape.slice_cols(wq_t, self.d, 2 * self.d)?;
        let wq_u = tape.transpose(top)?;
        let wq_p = tape.transpose(bottom)?;
        let g_u = tape.matmul(u, wq_u)?; // n x d
        let g_p = tape.matmul(p, wq_p)?; // m x d

        // exp(sigmoid(...)) summed over tokens, then normalized.
        let mut exps: Vec<Var> = Vec::with_capacity(m);
        let mut denom: Option<Var> = None;
        for j in 0..m {
            let g_pj = tape.select_rows(g_p, &[j])?; // 1 x d
            let shifted = tape.add(g_u, g_pj)?;
            let shifted = tape.add(shifted, bq)?;
            let s = tape.sigmoid(shifted)?;
            let e = tape.exp(s)?;
            denom = Some(match denom {
                None => e,
                Some(d) => tape.add(d, e)?,
            });
            exps.push(e);
        }
        let denom = denom.expect("m >= 1");
        let mut q: Option<Var> = None;
        for (j, e) in exps.into_iter().enumerate() {
            let alpha = tape.div(e, denom)?;
            let p_j = tape.select_rows(p, &[j])?;
            let term = tape.mul(alpha, p_j)?; // row-broadcast p_j
            q = Some(match q {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let q = q.expect("m >= 1");

        // beta = sigmoid([q; u] W_beta + b): blend tanh(q) into u.
        let wb = self.p(params, "qgate.w")?;
        let bb = self.p(params, "qgate.b")?;
        let qu = tape.concat(&[q, u], 1)?;
        let lin = tape.matmul(qu, wb)?;
        let pre = tape.add(lin, bb)?;
        let beta = tape.sigmoid(pre)?;
        let tq = tape.tanh(q)?;
        let gated = tape.mul(beta, tq)?;
        let keep = tape.one_minus(beta)?;
        let kept = tape.mul(keep, u)?;
        tape.add(gated, kept)
    }

    /// a = sigmoid([u; h] W_a + b_a); next h = a * tanh(u) + (1 - a) * h.
    pub fn gate(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        u: Var,
        h: Var,
    ) -> Result<Var, NumError> {
        let w = self.p(params, "gate.w")?;
        let b = self.p(params, "gate.b")?;
        let uh = tape.concat(&[u, h], 1)?;
        let lin = tape.matmul(uh, w)?;
        let pre = tape.add(lin, b)?;
        let a = tape.sigmoid(pre)?;
        let tu = tape.tanh(u)?;
        let through = tape.mul(a, tu)?;
        let keep = tape.one_minus(a)?;
        let kept = tape.mul(keep, h)?;
        tape.add(through, kept)
    }

    /// message -> update -> (query gate) -> gate.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        h: Var,
        p: Option<Var>,
        index: &NeighborIndex,
    ) -> Result<Var, NumError> {
        let m = self.message(tape, params, h, index)?;
        let mut u = self.update(tape, params, h, m)?;
        if self.query_aware {
            let p = p.ok_or(NumError::Empty { op: "query_gate" })?;
            u = self.query_gate(tape, params, u, p)?;
        }
        self.gate(tape, params, u, h)
    }
}

/// A stack of L layers with unshared weights.
#[derive(Debug, Clone)]
pub struct RgcnStack {
    layers: Vec<RgcnLayer>,
}

impl RgcnStack {
    pub fn declare(
        reg: &mut Registry,
        prefix: &str,
        d: usize,
        n_relations: usize,
        n_layers: usize,
        query_aware: bool,
    ) -> RgcnStack {
        let layers = (0..n_layers)
            .map(|l| {
                RgcnLayer::declare(reg, &format!("{prefix}/layer{l}"), d, n_relations, query_aware)
            })
            .collect();
        RgcnStack { layers }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        h0: Var,
        p: Option<Var>,
        index: &NeighborIndex,
    ) -> Result<Var, NumError> {
        let mut h = h0;
        for layer in &self.layers {
            h = layer.forward(tape, params, h, p, index)?;
        }
        Ok(h)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}
