//! End-to-end answer-selection architectures over relational graphs: query
//! encoding, optional graph convolution, bi-directional attention, and the
//! candidate-scoring output layer.
//!
//! Three architectures share one scoring head and differ in how the query
//! enters:
//! - `entity`: query vector concatenated to every node before and after a
//!   plainly gated convolution stack;
//! - `path`: projected node features through a query-aware stack, then
//!   bi-directional attention against the query tokens;
//! - `mashup`: the joint query–node embedding of `entity` combined with the
//!   query-aware stack and attention of `path`.

use serde::{Deserialize, Serialize};

use crate::embed::EmbedSourceSpec;
use crate::error::{DataError, Error, GraphError, NumError, Result};
use crate::graph::{GraphConfig, RelGraph, Relation};
use crate::num::{BiLstm, BoundParams, Init, ParamStore, Registry, Tape, Tensor, Var};
use crate::rgcn::{NeighborIndex, RgcnStack};

/// Architecture selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Entity,
    Path,
    Mashup,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Entity, Arch::Path, Arch::Mashup];

    /// Short name used as the leading segment of parameter names.
    pub fn name(self) -> &'static str {
        match self {
            Arch::Entity => "entity",
            Arch::Path => "path",
            Arch::Mashup => "mashup",
        }
    }

    /// Whether the convolution stack carries per-layer query gating.
    fn query_aware(self) -> bool {
        matches!(self, Arch::Path | Arch::Mashup)
    }

    /// Whether node representations pass through bi-directional attention
    /// before scoring.
    fn uses_biattention(self) -> bool {
        matches!(self, Arch::Path | Arch::Mashup)
    }
}

/// Everything needed to build a model deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Hidden width before scaling. Must be even (the query encoder splits
    /// it across directions).
    pub d: usize,
    /// Convolution layers; ignored when `use_rgcn` is false.
    pub layers: usize,
    /// False removes the convolution stack and nothing else.
    pub use_rgcn: bool,
    /// 1 keeps `d`; 2 re-solves the width so the total parameter count
    /// roughly doubles.
    pub scale: u8,
    pub graph: GraphConfig,
    pub embed: Vec<EmbedSourceSpec>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(arch: Arch) -> ModelConfig {
        ModelConfig {
            arch,
            d: 256,
            layers: 3,
            use_rgcn: true,
            scale: 1,
            graph: GraphConfig::default(),
            embed: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.d % 2 != 0 {
            return Err(DataError::BadConfig(format!(
                "hidden width must be an even number >= 2, got {}",
                self.d
            ))
            .into());
        }
        if self.layers == 0 {
            return Err(DataError::BadConfig("layer count must be >= 1".into()).into());
        }
        if !matches!(self.scale, 1 | 2) {
            return Err(
                DataError::BadConfig(format!("scale must be 1 or 2, got {}", self.scale)).into(),
            );
        }
        if self.embed.is_empty() {
            return Err(
                DataError::BadConfig("at least one embedding source is required".into()).into(),
            );
        }
        self.graph.validate()?;
        Ok(())
    }
}

/// Affine map with parameters `<prefix>.w` and `<prefix>.b`.
#[derive(Debug, Clone)]
pub struct Linear {
    prefix: String,
}

impl Linear {
    pub fn declare(
        reg: &mut Registry,
        prefix: impl Into<String>,
        d_in: usize,
        d_out: usize,
    ) -> Linear {
        let prefix = prefix.into();
        reg.declare(format!("{prefix}.w"), &[d_in, d_out], Init::Glorot);
        reg.declare(format!("{prefix}.b"), &[1, d_out], Init::Zeros);
        Linear { prefix }
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var, NumError> {
        let w = params.var(&format!("{}.w", self.prefix))?;
        let b = params.var(&format!("{}.b", self.prefix))?;
        let lin = tape.matmul(x, w)?;
        tape.add(lin, b)
    }
}

/// Two affine maps around a tanh, parameters under `<prefix>/l1` and
/// `<prefix>/l2`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn declare(
        reg: &mut Registry,
        prefix: impl Into<String>,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> FeedForward {
        let prefix = prefix.into();
        FeedForward {
            l1: Linear::declare(reg, format!("{prefix}/l1"), d_in, hidden),
            l2: Linear::declare(reg, format!("{prefix}/l2"), hidden, d_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var, NumError> {
        let h = self.l1.forward(tape, params, x)?;
        let t = tape.tanh(h)?;
        self.l2.forward(tape, params, t)
    }
}

/// Bi-directional attention between node rows and query-token rows.
///
/// Similarity S[i,j] = w · [n_i; p_j; n_i ⊙ p_j] with one 3d weight vector.
/// Each node reads a token summary through a row softmax over S; a pooled
/// node summary is read back through a softmax over each node's strongest
/// token score, restricted to the rows named by `pool_rows` so that scores
/// stay local to candidate neighborhoods.
#[derive(Debug, Clone)]
pub struct BiAttention {
    prefix: String,
    d: usize,
    ff: FeedForward,
}

impl BiAttention {
    pub fn declare(reg: &mut Registry, prefix: impl Into<String>, d: usize) -> BiAttention {
        let prefix = prefix.into();
        reg.declare(format!("{prefix}/sim.w"), &[3 * d, 1], Init::Glorot);
        let ff = FeedForward::declare(reg, format!("{prefix}/ff"), 4 * d, d, d);
        BiAttention { prefix, d, ff }
    }

    /// The two attention summaries: a token summary per node (n x d) and one
    /// pooled node row (1 x d) drawn from the `pool_rows` subset.
    pub fn contexts(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        nodes: Var,
        tokens: Var,
        pool_rows: &[bool],
    ) -> Result<(Var, Var), NumError> {
        let (n, dn) = tape.value(nodes)?.dims2()?;
        let (m, dp) = tape.value(tokens)?.dims2()?;
        if n == 0 || m == 0 {
            return Err(NumError::Empty { op: "biattention" });
        }
        if dn != self.d || dp != self.d {
            return Err(NumError::BadShape {
                op: "biattention",
                expected: "node and token width equal to the declared width",
                got: vec![dn, dp],
            });
        }
        let w = params.var(&format!("{}/sim.w", self.prefix))?;
        let wt = tape.transpose(w)?;
        let wn_t = tape.slice_cols(wt, 0, self.d)?;
        let wp_t = tape.slice_cols(wt, self.d, 2 * self.d)?;
        let wx = tape.slice_cols(wt, 2 * self.d, 3 * self.d)?;
        let wn = tape.transpose(wn_t)?;
        let wp = tape.transpose(wp_t)?;

        // S decomposes into a node column, a token row, and a cross term.
        let node_col = tape.matmul(nodes, wn)?;
        let ones_m = tape.leaf(Tensor::new(vec![1, m], vec![1.0; m])?)?;
        let node_part = tape.matmul(node_col, ones_m)?;
        let tok_col = tape.matmul(tokens, wp)?;
        let tok_row = tape.transpose(tok_col)?;
        let ones_n = tape.leaf(Tensor::new(vec![n, 1], vec![1.0; n])?)?;
        let tok_part = tape.matmul(ones_n, tok_row)?;
        let nx = tape.mul(nodes, wx)?;
        let tokens_t = tape.transpose(tokens)?;
        let cross = tape.matmul(nx, tokens_t)?;
        let s_partial = tape.add(node_part, tok_part)?;
        let s = tape.add(s_partial, cross)?;

        let alpha = tape.softmax_rows(s, None)?;
        let token_summary = tape.matmul(alpha, tokens)?;

        let strongest = tape.row_max(s)?;
        let strongest_row = tape.transpose(strongest)?;
        let beta = tape.softmax_rows(strongest_row, Some(pool_rows))?;
        let pooled = tape.matmul(beta, nodes)?;
        Ok((token_summary, pooled))
    }

    /// [n; ñ; n ⊙ ñ; n ⊙ pooled] pushed through the projection head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        nodes: Var,
        tokens: Var,
        pool_rows: &[bool],
    ) -> Result<Var, NumError> {
        let (token_summary, pooled) = self.contexts(tape, params, nodes, tokens, pool_rows)?;
        let own_summary = tape.mul(nodes, token_summary)?;
        let own_pooled = tape.mul(nodes, pooled)?;
        let g = tape.concat(&[nodes, token_summary, own_summary, own_pooled], 1)?;
        self.ff.forward(tape, params, g)
    }
}

/// Scores from one forward pass, covering everything answer selection sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScores {
    /// Raw scalar per candidate-bearing node (mentions and placeholders),
    /// in node order. Non-candidate nodes are never scored.
    pub node_logits: Vec<f64>,
    /// Max over each candidate's nodes, in candidate order.
    pub candidate_logits: Vec<f64>,
    /// Softmax over `candidate_logits`.
    pub probabilities: Vec<f64>,
}

impl NodeScores {
    /// Index of the highest-probability candidate.
    pub fn predicted(&self) -> usize {
        self.probabilities
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Tape handles for training plus extracted numbers for reporting.
pub struct ForwardOut {
    /// 1 x n_candidates.
    pub logits: Var,
    /// n_nodes x 1.
    pub node_logits: Var,
    pub scores: NodeScores,
}

#[derive(Debug, Clone)]
struct Parts {
    query: BiLstm,
    joint: Option<FeedForward>,
    proj: Option<Linear>,
    stack: Option<RgcnStack>,
    biatt: Option<BiAttention>,
    out: FeedForward,
}

fn declare_parts(
    reg: &mut Registry,
    cfg: &ModelConfig,
    embed_dim: usize,
    d: usize,
) -> Result<Parts, NumError> {
    let a = cfg.arch.name();
    let query = BiLstm::declare(reg, format!("{a}/query"), embed_dim, d)?;
    let (joint, proj) = match cfg.arch {
        Arch::Entity | Arch::Mashup => (
            Some(FeedForward::declare(
                reg,
                format!("{a}/joint"),
                d + embed_dim,
                d,
                d,
            )),
            None,
        ),
        Arch::Path => (None, Some(Linear::declare(reg, format!("{a}/proj"), embed_dim, d))),
    };
    let n_relations = Relation::active_set(&cfg.graph).len();
    let stack = cfg.use_rgcn.then(|| {
        RgcnStack::declare(
            reg,
            &format!("{a}/rgcn"),
            d,
            n_relations,
            cfg.layers,
            cfg.arch.query_aware(),
        )
    });
    let biatt = cfg
        .arch
        .uses_biattention()
        .then(|| BiAttention::declare(reg, format!("{a}/biatt"), d));
    // The entity head sees the query vector next to each node again.
    let out_in = match cfg.arch {
        Arch::Entity => 2 * d,
        Arch::Path | Arch::Mashup => d,
    };
    let out = FeedForward::declare(reg, format!("{a}/out"), out_in, d, 1);
    Ok(Parts {
        query,
        joint,
        proj,
        stack,
        biatt,
        out,
    })
}

/// Hidden width after applying the scale knob. Scale 2 scans even widths and
/// keeps the one whose total parameter count is closest to double the
/// unscaled count.
pub fn effective_width(cfg: &ModelConfig, embed_dim: usize) -> Result<usize> {
    let count = |d: usize| -> Result<usize, NumError> {
        let mut reg = Registry::new();
        declare_parts(&mut reg, cfg, embed_dim, d)?;
        Ok(reg.param_count())
    };
    match cfg.scale {
        1 => Ok(cfg.d),
        2 => {
            let target = 2 * count(cfg.d)?;
            let mut best: Option<(usize, usize)> = None;
            let mut d2 = cfg.d;
            while d2 <= 4 * cfg.d {
                let diff = count(d2)?.abs_diff(target);
                if best.is_none_or(|(b, _)| diff < b) {
                    best = Some((diff, d2));
                }
                d2 += 2;
            }
            Ok(best.expect("scan range is non-empty").1)
        }
        s => Err(DataError::BadConfig(format!("scale must be 1 or 2, got {s}")).into()),
    }
}

/// One architecture with its parameter layout fixed. Parameters themselves
/// live in a [`ParamStore`]; the model only knows names and shapes.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    embed_dim: usize,
    width: usize,
    relations: Vec<Relation>,
    registry: Registry,
    parts: Parts,
}

impl Model {
    pub fn new(cfg: ModelConfig, embed_dim: usize) -> Result<Model> {
        cfg.validate()?;
        if embed_dim == 0 {
            return Err(DataError::BadConfig("embedding width must be > 0".into()).into());
        }
        let width = effective_width(&cfg, embed_dim)?;
        let mut registry = Registry::new();
        let parts = declare_parts(&mut registry, &cfg, embed_dim, width)?;
        let relations = Relation::active_set(&cfg.graph);
        Ok(Model {
            cfg,
            embed_dim,
            width,
            relations,
            registry,
            parts,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Width actually used (differs from `config().d` when scale = 2).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    /// Fresh parameters drawn from the config seed.
    pub fn init_params(&self) -> ParamStore {
        self.registry.init(self.cfg.seed)
    }

    /// Per-token states (m x d) and the pooled query vector (1 x d).
    pub fn encode_query(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        tokens: &Tensor,
    ) -> Result<(Var, Var), NumError> {
        let seq = tape.leaf(tokens.clone())?;
        let out = self.parts.query.forward(tape, params, seq)?;
        Ok((out.states, out.pooled))
    }

    /// Score all candidates of one graph. `h0` holds raw node features
    /// (n_nodes x embed_dim) and `query_tokens` raw token features
    /// (m x embed_dim).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        graph: &RelGraph,
        h0: &Tensor,
        query_tokens: &Tensor,
    ) -> Result<ForwardOut> {
        let n = graph.nodes.len();
        let dims = h0.dims2()?;
        if dims != (n, self.embed_dim) {
            return Err(NumError::BadShape {
                op: "model forward",
                expected: "one feature row per graph node, embed_dim wide",
                got: vec![dims.0, dims.1],
            }
            .into());
        }
        let groups = candidate_groups(graph)?;
        let (p_states, pooled) = self.encode_query(tape, params, query_tokens)?;
        let h0v = tape.leaf(h0.clone())?;

        let mut h = match (&self.parts.joint, &self.parts.proj) {
            (Some(joint), None) => {
                let q_rows = tape.repeat_rows(pooled, n)?;
                let x = tape.concat(&[q_rows, h0v], 1)?;
                joint.forward(tape, params, x)?
            }
            (None, Some(proj)) => proj.forward(tape, params, h0v)?,
            _ => unreachable!("every architecture declares exactly one of joint/proj"),
        };

        if let Some(stack) = &self.parts.stack {
            let index = NeighborIndex::from_graph(graph, &self.relations)?;
            let p_opt = self.cfg.arch.query_aware().then_some(p_states);
            h = stack.forward(tape, params, h, p_opt, &index)?;
        }

        let final_reps = match &self.parts.biatt {
            Some(biatt) => {
                let mut pool_rows = vec![false; n];
                for &(node, _) in &graph.candidate_nodes() {
                    pool_rows[node] = true;
                }
                biatt.forward(tape, params, h, p_states, &pool_rows)?
            }
            None => {
                let q_rows = tape.repeat_rows(pooled, n)?;
                tape.concat(&[q_rows, h], 1)?
            }
        };
        self.score(tape, params, final_reps, &groups)
    }

    /// Scalar per node, max per candidate, softmax over candidates.
    fn score(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        final_reps: Var,
        groups: &[Vec<usize>],
    ) -> Result<ForwardOut> {
        let node_logits = self.parts.out.forward(tape, params, final_reps)?;
        let mut per_candidate = Vec::with_capacity(groups.len());
        for nodes in groups {
            let sel = tape.select_rows(node_logits, nodes)?;
            let sel_row = tape.transpose(sel)?;
            per_candidate.push(tape.row_max(sel_row)?);
        }
        let logits = tape.concat(&per_candidate, 1)?;

        let logit_vals = tape.value(logits)?.row_slice(0).to_vec();
        let mx = logit_vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logit_vals.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        let probabilities = logit_vals.iter().map(|x| (x - lse).exp()).collect();
        let mut cand_ixs: Vec<usize> = groups.iter().flatten().copied().collect();
        cand_ixs.sort_unstable();
        let all_logits = tape.value(node_logits)?.data();
        let scores = NodeScores {
            node_logits: cand_ixs.iter().map(|&i| all_logits[i]).collect(),
            candidate_logits: logit_vals,
            probabilities,
        };
        Ok(ForwardOut {
            logits,
            node_logits,
            scores,
        })
    }

    /// Negative log-likelihood of the gold candidate, as a 1x1 tape node.
    pub fn loss(&self, tape: &mut Tape, out: &ForwardOut, gold: usize) -> Result<Var, NumError> {
        let lse = tape.logsumexp_rows(out.logits)?;
        let gold_logit = tape.slice_cols(out.logits, gold, gold + 1)?;
        tape.sub(lse, gold_logit)
    }
}

/// Node indices per candidate. Sentence, reason, and query nodes never carry
/// a candidate index, so they are excluded here and thus from scoring.
fn candidate_groups(graph: &RelGraph) -> Result<Vec<Vec<usize>>, Error> {
    if graph.n_candidates == 0 {
        return Err(GraphError::BadInstance {
            id: graph.instance_id.clone(),
            what: "graph has no candidates to score".into(),
        }
        .into());
    }
    let mut groups = vec![Vec::new(); graph.n_candidates];
    for (node, cand) in graph.candidate_nodes() {
        groups[cand].push(node);
    }
    for (c, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(GraphError::BadInstance {
                id: graph.instance_id.clone(),
                what: format!("candidate {c} has no graph nodes"),
            }
            .into());
        }
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Embedder;
    use crate::graph::{build_graph, Edge, Instance, Mention, Node, NodeKind};
    use crate::util::{keyed_rng, uniform_sym};

    fn hash_spec(dim: usize) -> EmbedSourceSpec {
        EmbedSourceSpec::HashFallback {
            name: "hash".into(),
            dim,
        }
    }

    fn small_config(arch: Arch, use_rgcn: bool) -> ModelConfig {
        ModelConfig {
            arch,
            d: 4,
            layers: 2,
            use_rgcn,
            scale: 1,
            graph: GraphConfig::default(),
            embed: vec![hash_spec(6)],
            seed: 7,
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64, label: &str) -> Tensor {
        let mut rng = keyed_rng(seed, label);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| uniform_sym(&mut rng, 1.0))
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn mention(referent: &str, doc: usize, sent: usize, start: usize) -> Mention {
        Mention {
            referent: referent.into(),
            surface: referent.into(),
            doc,
            sentence: sent,
            span: (start, start + 1),
        }
    }

    fn cand_node(c: usize, referent: &str, doc: usize, start: usize) -> Node {
        Node {
            kind: NodeKind::Cand,
            mention: Some(mention(referent, doc, 0, start)),
            sentence: None,
            candidate_index: Some(c),
        }
    }

    fn entity_node(referent: &str, doc: usize, start: usize) -> Node {
        Node {
            kind: NodeKind::Query,
            mention: Some(mention(referent, doc, 0, start)),
            sentence: None,
            candidate_index: None,
        }
    }

    fn toy_graph(n_candidates: usize, nodes: Vec<Node>, edges: &[(usize, usize, Relation)]) -> RelGraph {
        RelGraph {
            instance_id: "toy".into(),
            n_candidates,
            nodes,
            edges: edges
                .iter()
                .map(|&(src, dst, rel)| Edge { src, dst, rel })
                .collect(),
        }
    }

    fn run(model: &Model, store: &ParamStore, graph: &RelGraph, h0: &Tensor, q: &Tensor) -> NodeScores {
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape).unwrap();
        model.forward(&mut tape, &bound, graph, h0, q).unwrap().scores
    }

    #[test]
    fn query_encoding_is_deterministic_and_shaped_by_tokens() {
        let model = Model::new(small_config(Arch::Mashup, true), 6).unwrap();
        let store = model.init_params();
        let tokens = rand_tensor(&[1, 6], 1, "q");
        let encode = |st: &ParamStore| {
            let mut tape = Tape::new();
            let bound = st.bind_all(&mut tape).unwrap();
            let (p, pooled) = model.encode_query(&mut tape, &bound, &tokens).unwrap();
            (
                tape.value(p).unwrap().clone(),
                tape.value(pooled).unwrap().clone(),
            )
        };
        let (p1, pool1) = encode(&store);
        assert_eq!(p1.dims2().unwrap(), (1, 4));
        assert_eq!(pool1.dims2().unwrap(), (1, 4));
        // Same store again, and a fresh store from the same seed: identical.
        let (p2, pool2) = encode(&store);
        assert_eq!(p1, p2);
        assert_eq!(pool1, pool2);
        let (p3, _) = encode(&model.init_params());
        assert_eq!(p1, p3);

        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape).unwrap();
        let empty = Tensor::zeros(&[0, 6]);
        assert!(model.encode_query(&mut tape, &bound, &empty).is_err());
    }

    #[test]
    fn biattention_context_reduces_to_the_single_token() {
        let d = 3;
        let mut reg = Registry::new();
        let biatt = BiAttention::declare(&mut reg, "b", d);
        let store = reg.init(2);
        let nodes = rand_tensor(&[4, d], 3, "n");
        let tokens = rand_tensor(&[1, d], 4, "p");
        let pool = [true, false, false, true];
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape).unwrap();
        let nv = tape.leaf(nodes.clone()).unwrap();
        let pv = tape.leaf(tokens.clone()).unwrap();
        let (summary, _) = biatt.contexts(&mut tape, &bound, nv, pv, &pool).unwrap();
        let sv = tape.value(summary).unwrap();
        // Softmax over one token is exactly 1, so every row is the token.
        for i in 0..4 {
            assert_eq!(sv.row_slice(i), tokens.row_slice(0));
        }
        let out = biatt.forward(&mut tape, &bound, nv, pv, &pool).unwrap();
        assert_eq!(tape.value(out).unwrap().dims2().unwrap(), (4, d));
    }

    #[test]
    fn biattention_matches_scalar_transcription() {
        let (n, m, d) = (2, 2, 3);
        let mut reg = Registry::new();
        let biatt = BiAttention::declare(&mut reg, "b", d);
        let store = reg.init(5);
        let nodes = rand_tensor(&[n, d], 6, "n");
        let tokens = rand_tensor(&[m, d], 7, "p");
        for pool in [[true, true], [true, false]] {
            let mut tape = Tape::new();
            let bound = store.bind_all(&mut tape).unwrap();
            let nv = tape.leaf(nodes.clone()).unwrap();
            let pv = tape.leaf(tokens.clone()).unwrap();
            let out = biatt.forward(&mut tape, &bound, nv, pv, &pool).unwrap();
            let got = tape.value(out).unwrap().clone();

            let w = &store.get("b/sim.w").unwrap().value;
            let (wn, wp, wx) = (
                (0..d).map(|k| w.at2(k, 0)).collect::<Vec<_>>(),
                (0..d).map(|k| w.at2(d + k, 0)).collect::<Vec<_>>(),
                (0..d).map(|k| w.at2(2 * d + k, 0)).collect::<Vec<_>>(),
            );
            let mut s = vec![vec![0.0; m]; n];
            for i in 0..n {
                for j in 0..m {
                    for k in 0..d {
                        s[i][j] += nodes.at2(i, k) * wn[k]
                            + tokens.at2(j, k) * wp[k]
                            + nodes.at2(i, k) * wx[k] * tokens.at2(j, k);
                    }
                }
            }
            // Token summary per node.
            let mut summary = vec![vec![0.0; d]; n];
            for i in 0..n {
                let mx = s[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s[i].iter().map(|x| (x - mx).exp()).sum();
                for j in 0..m {
                    let a = (s[i][j] - mx).exp() / z;
                    for k in 0..d {
                        summary[i][k] += a * tokens.at2(j, k);
                    }
                }
            }
            // Pooled node over the kept rows.
            let strongest: Vec<f64> = (0..n)
                .map(|i| s[i].iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let mx = (0..n)
                .filter(|&i| pool[i])
                .map(|i| strongest[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n)
                .filter(|&i| pool[i])
                .map(|i| (strongest[i] - mx).exp())
                .sum();
            let mut pooled = vec![0.0; d];
            for i in 0..n {
                if pool[i] {
                    let b = (strongest[i] - mx).exp() / z;
                    for k in 0..d {
                        pooled[k] += b * nodes.at2(i, k);
                    }
                }
            }
            // Projection head.
            let g = |name: &str| store.get(&format!("b/ff/{name}")).unwrap().value.clone();
            let (w1, b1, w2, b2) = (g("l1.w"), g("l1.b"), g("l2.w"), g("l2.b"));
            for i in 0..n {
                let mut feat = Vec::with_capacity(4 * d);
                feat.extend((0..d).map(|k| nodes.at2(i, k)));
                feat.extend((0..d).map(|k| summary[i][k]));
                feat.extend((0..d).map(|k| nodes.at2(i, k) * summary[i][k]));
                feat.extend((0..d).map(|k| nodes.at2(i, k) * pooled[k]));
                let mut hidden = vec![0.0; d];
                for k in 0..d {
                    let mut acc = b1.at2(0, k);
                    for (t, f) in feat.iter().enumerate() {
                        acc += f * w1.at2(t, k);
                    }
                    hidden[k] = acc.tanh();
                }
                for k in 0..d {
                    let mut acc = b2.at2(0, k);
                    for t in 0..d {
                        acc += hidden[t] * w2.at2(t, k);
                    }
                    assert!(
                        (got.at2(i, k) - acc).abs() < 1e-12,
                        "row {i} col {k}: {} vs {acc}",
                        got.at2(i, k)
                    );
                }
            }
        }
    }

    #[test]
    fn symmetric_candidates_split_probability_and_lone_candidates_take_it_all() {
        let model = Model::new(small_config(Arch::Entity, false), 6).unwrap();
        let store = model.init_params();
        let q = rand_tensor(&[2, 6], 8, "q");
        // Two candidates with identical feature rows and no edges.
        let g2 = toy_graph(
            2,
            vec![cand_node(0, "ada", 0, 0), cand_node(1, "bob", 0, 2)],
            &[],
        );
        let row = rand_tensor(&[1, 6], 9, "h");
        let h0 = Tensor::from_rows(&[row.data().to_vec(), row.data().to_vec()]).unwrap();
        let scores = run(&model, &store, &g2, &h0, &q);
        assert_eq!(scores.candidate_logits[0], scores.candidate_logits[1]);
        assert!((scores.probabilities[0] - 0.5).abs() < 1e-12);
        assert!((scores.probabilities[1] - 0.5).abs() < 1e-12);

        let g1 = toy_graph(1, vec![cand_node(0, "ada", 0, 0)], &[]);
        let h1 = rand_tensor(&[1, 6], 10, "h");
        let scores = run(&model, &store, &g1, &h1, &q);
        assert_eq!(scores.probabilities, vec![1.0]);
    }

    #[test]
    fn candidate_logit_is_the_max_over_its_nodes() {
        let model = Model::new(small_config(Arch::Entity, false), 6).unwrap();
        let store = model.init_params();
        let q = rand_tensor(&[1, 6], 11, "q");
        let graph = toy_graph(
            2,
            vec![
                cand_node(0, "ada", 0, 0),
                cand_node(0, "ada", 1, 0),
                cand_node(1, "bob", 0, 2),
            ],
            &[],
        );
        let h0 = rand_tensor(&[3, 6], 12, "h");
        let scores = run(&model, &store, &graph, &h0, &q);
        let expect0 = scores.node_logits[0].max(scores.node_logits[1]);
        assert_eq!(scores.candidate_logits[0], expect0);
        assert_eq!(scores.candidate_logits[1], scores.node_logits[2]);
    }

    #[test]
    fn scores_recount_from_node_logits() {
        let model = Model::new(small_config(Arch::Mashup, false), 6).unwrap();
        let store = model.init_params();
        let q = rand_tensor(&[3, 6], 13, "q");
        // Five candidates with 3/2/1/1/1 nodes, plus two non-candidate
        // entities that must stay out of the scoring.
        let graph = toy_graph(
            5,
            vec![
                cand_node(0, "a", 0, 0),
                cand_node(0, "a", 0, 4),
                cand_node(0, "a", 1, 0),
                cand_node(1, "b", 0, 2),
                cand_node(1, "b", 1, 2),
                cand_node(2, "c", 1, 4),
                cand_node(3, "d", 2, 0),
                cand_node(4, "e", 2, 2),
                entity_node("x", 0, 6),
                entity_node("y", 2, 4),
            ],
            &[],
        );
        let h0 = rand_tensor(&[10, 6], 14, "h");
        let scores = run(&model, &store, &graph, &h0, &q);
        assert_eq!(scores.node_logits.len(), 8);

        let groups: [&[usize]; 5] = [&[0, 1, 2], &[3, 4], &[5], &[6], &[7]];
        let logits: Vec<f64> = groups
            .iter()
            .map(|g| g.iter().map(|&i| scores.node_logits[i]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        // Recount the softmax summing in reverse order.
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().rev().map(|x| (x - mx).exp()).sum();
        for c in 0..5 {
            assert_eq!(scores.candidate_logits[c], logits[c]);
            let p = (logits[c] - mx).exp() / z;
            assert!((scores.probabilities[c] - p).abs() < 1e-9);
        }
        let total: f64 = scores.probabilities.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn candidate_permutation_keeps_the_winning_string() {
        let make = |candidates: [&str; 3]| -> Instance {
            serde_json::from_value(serde_json::json!({
                "id": "perm",
                "query": "located_in Alpha Tower",
                "candidates": candidates,
                "supports": [
                    [["Alpha", "Tower", "is", "in", "Berlin"]],
                    [["Berlin", "Madrid", "and", "Oslo", "are", "cities"]],
                ],
                "answer": candidates[0],
            }))
            .unwrap()
        };
        let mut cfg = small_config(Arch::Mashup, true);
        cfg.embed = vec![hash_spec(8)];
        cfg.layers = 1;
        let model = Model::new(cfg.clone(), 8).unwrap();
        let store = model.init_params();
        let embedder = Embedder::from_specs(&cfg.embed).unwrap();

        let mut by_string: Vec<std::collections::BTreeMap<String, f64>> = Vec::new();
        let mut winners = Vec::new();
        for candidates in [["Berlin", "Madrid", "Oslo"], ["Oslo", "Berlin", "Madrid"]] {
            let inst = make(candidates);
            let graph = build_graph(&inst, &cfg.graph).unwrap();
            let h0 = embedder.node_features(&inst, &graph).unwrap();
            let q = embedder.query_features(&inst).unwrap();
            let scores = run(&model, &store, &graph, &h0, &q);
            winners.push(candidates[scores.predicted()].to_string());
            by_string.push(
                candidates
                    .iter()
                    .zip(&scores.probabilities)
                    .map(|(c, &p)| (c.to_string(), p))
                    .collect(),
            );
        }
        assert_eq!(winners[0], winners[1]);
        for (c, p) in &by_string[0] {
            assert!((p - by_string[1][c]).abs() < 1e-9, "{c}");
        }
    }

    #[test]
    fn edges_are_invisible_without_the_convolution_stack() {
        for arch in Arch::ALL {
            let model = Model::new(small_config(arch, false), 6).unwrap();
            let store = model.init_params();
            let q = rand_tensor(&[2, 6], 15, "q");
            let nodes = vec![
                cand_node(0, "ada", 0, 0),
                cand_node(1, "bob", 0, 2),
                entity_node("x", 1, 0),
            ];
            let h0 = rand_tensor(&[3, 6], 16, "h");
            let wired = toy_graph(
                2,
                nodes.clone(),
                &[
                    (0, 1, Relation::CoDoc),
                    (2, 0, Relation::MatchAcross),
                    (1, 2, Relation::Complement),
                ],
            );
            let bare = toy_graph(2, nodes, &[]);
            let a = run(&model, &store, &wired, &h0, &q);
            let b = run(&model, &store, &bare, &h0, &q);
            assert_eq!(a, b, "{arch:?}");
        }
    }

    #[test]
    fn scale_two_roughly_doubles_parameters() {
        for arch in Arch::ALL {
            let mut cfg = small_config(arch, true);
            cfg.d = 8;
            cfg.embed = vec![hash_spec(10)];
            let base = Model::new(cfg.clone(), 10).unwrap();
            cfg.scale = 2;
            let scaled = Model::new(cfg, 10).unwrap();
            let ratio = scaled.registry().param_count() as f64
                / base.registry().param_count() as f64;
            assert!((1.7..=2.3).contains(&ratio), "{arch:?}: ratio {ratio}");
            assert!(scaled.width() > base.width());
            assert_eq!(scaled.width() % 2, 0);
        }
    }

    #[test]
    fn removing_the_stack_removes_only_convolution_parameters() {
        let with = Model::new(small_config(Arch::Mashup, true), 6).unwrap();
        let without = Model::new(small_config(Arch::Mashup, false), 6).unwrap();
        let names = |m: &Model| -> Vec<String> {
            m.registry().entries().iter().map(|(n, _, _)| n.clone()).collect()
        };
        assert!(names(&with).iter().any(|n| n.contains("/rgcn/")));
        assert!(!names(&without).iter().any(|n| n.contains("/rgcn/")));
        let kept: Vec<String> = names(&with)
            .into_iter()
            .filter(|n| !n.contains("/rgcn/"))
            .collect();
        assert_eq!(kept, names(&without));
    }

    #[test]
    fn candidate_scores_ignore_nodes_beyond_layer_reach() {
        // Chain 2 -> 1 -> 0 with the candidate at node 0 and one layer:
        // node 2 is out of reach, node 1 is not.
        let mut cfg = small_config(Arch::Path, true);
        cfg.layers = 1;
        let model = Model::new(cfg, 6).unwrap();
        let store = model.init_params();
        let q = rand_tensor(&[2, 6], 17, "q");
        let graph = toy_graph(
            1,
            vec![
                cand_node(0, "ada", 0, 0),
                entity_node("x", 0, 2),
                entity_node("y", 1, 0),
            ],
            &[(1, 0, Relation::CoDoc), (2, 1, Relation::MatchAcross)],
        );
        let h0 = rand_tensor(&[3, 6], 18, "h");
        let base = run(&model, &store, &graph, &h0, &q);

        let mut far = h0.clone();
        far.data_mut()[2 * 6 + 1] += 0.75;
        let far_scores = run(&model, &store, &graph, &far, &q);
        assert_eq!(base, far_scores);

        let mut near = h0.clone();
        near.data_mut()[6 + 1] += 0.75;
        let near_scores = run(&model, &store, &graph, &near, &q);
        assert_ne!(base.candidate_logits, near_scores.candidate_logits);
    }

    #[test]
    fn gradients_match_finite_differences_for_every_architecture() {
        let graph = toy_graph(
            2,
            vec![
                cand_node(0, "ada", 0, 0),
                cand_node(1, "bob", 0, 2),
                entity_node("x", 0, 4),
                entity_node("y", 1, 0),
                entity_node("x", 1, 2),
            ],
            &[
                (2, 0, Relation::CoDoc),
                (0, 2, Relation::CoDoc),
                (3, 1, Relation::MatchAcross),
                (4, 2, Relation::MatchWithin),
                (2, 4, Relation::MatchWithin),
                (3, 4, Relation::CoDoc),
            ],
        );
        let h0 = rand_tensor(&[5, 6], 19, "h");
        let q = rand_tensor(&[2, 6], 20, "q");
        for arch in Arch::ALL {
            let model = Model::new(small_config(arch, true), 6).unwrap();
            let store = model.init_params();
            let eval = |st: &ParamStore| {
                let mut tape = Tape::new();
                let bound = st.bind_all(&mut tape).unwrap();
                let out = model.forward(&mut tape, &bound, &graph, &h0, &q).unwrap();
                let loss = model.loss(&mut tape, &out, 1).unwrap();
                let scalar = tape.sum_all(loss).unwrap();
                (tape, bound, scalar)
            };
            let (tape, bound, loss) = eval(&store);
            let grads = tape.backward(loss).unwrap();
            let by_name = bound.grads(&grads).unwrap();

            let eps = 1e-5;
            let names: Vec<String> = store.names().map(String::from).collect();
            for name in &names {
                let analytic = &by_name[name.as_str()];
                for i in 0..analytic.numel() {
                    let f = |delta: f64| {
                        let mut st = store.clone();
                        st.get_mut(name).unwrap().value.data_mut()[i] += delta;
                        let (t, _, l) = eval(&st);
                        t.value(l).unwrap().item().unwrap()
                    };
                    let fd = (f(eps) - f(-eps)) / (2.0 * eps);
                    let an = analytic.data()[i];
                    let ok = (an - fd).abs() < 1e-7
                        || (an - fd).abs() / an.abs().max(fd.abs()) < 1e-4;
                    assert!(ok, "{arch:?} {name}[{i}]: analytic {an} vs fd {fd}");
                }
            }
        }
    }

    #[test]
    fn config_validation_rejects_inconsistent_settings() {
        let good = small_config(Arch::Entity, true);
        assert!(good.validate().is_ok());
        for tweak in [
            &mut |c: &mut ModelConfig| c.d = 5,
            &mut |c: &mut ModelConfig| c.d = 0,
            &mut |c: &mut ModelConfig| c.layers = 0,
            &mut |c: &mut ModelConfig| c.scale = 3,
            &mut |c: &mut ModelConfig| c.embed.clear(),
            &mut |c: &mut ModelConfig| c.graph.max_path_docs = 1,
        ] as [&mut dyn FnMut(&mut ModelConfig); 6]
        {
            let mut cfg = good.clone();
            tweak(&mut cfg);
            assert!(cfg.validate().is_err());
            assert!(Model::new(cfg, 6).is_err());
        }
    }

    #[test]
    fn graphs_without_candidate_nodes_are_rejected() {
        let model = Model::new(small_config(Arch::Entity, false), 6).unwrap();
        let store = model.init_params();
        let q = rand_tensor(&[1, 6], 21, "q");
        let attempt = |graph: &RelGraph, rows: usize| {
            let h0 = rand_tensor(&[rows, 6], 22, "h");
            let mut tape = Tape::new();
            let bound = store.bind_all(&mut tape).unwrap();
            model
                .forward(&mut tape, &bound, graph, &h0, &q)
                .map(|o| o.scores)
        };
        // Candidate 1 exists in the count but has no nodes.
        let missing = toy_graph(2, vec![cand_node(0, "ada", 0, 0)], &[]);
        assert!(attempt(&missing, 1).is_err());
        let none = toy_graph(0, vec![entity_node("x", 0, 0)], &[]);
        assert!(attempt(&none, 1).is_err());
    }
}
