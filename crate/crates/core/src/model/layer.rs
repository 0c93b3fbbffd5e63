//! One sparse mixture-of-experts block: router, top-K gating and the
//! residual expert mixture `h_t = u_t + sum_i g_{i,t} FFN_i(u_t)`.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::ModelConfig;

/// Two-layer SiLU feed-forward network `d -> hidden -> d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert<S> {
    pub up: Tensor<S>,
    pub down: Tensor<S>,
}

impl<S: Scalar> Expert<S> {
    pub(crate) fn init<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            up: Tensor::randn(vec![d, hidden], 1.0 / (d as f64).sqrt(), rng)?,
            down: Tensor::randn(vec![hidden, d], 1.0 / (hidden as f64).sqrt(), rng)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoELayer<S> {
    /// `[d, N]` router weights.
    pub router: Tensor<S>,
    pub experts: Vec<Expert<S>>,
    pub shared: Vec<Expert<S>>,
}

impl<S: Scalar> MoELayer<S> {
    pub(crate) fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.embed_dim;
        let router = Tensor::randn(vec![d, cfg.experts_per_layer], 1.0 / (d as f64).sqrt(), rng)?;
        let experts = (0..cfg.experts_per_layer)
            .map(|_| Expert::init(d, cfg.ffn_hidden, rng))
            .collect::<Result<_>>()?;
        let shared = (0..cfg.shared_experts)
            .map(|_| Expert::init(d, cfg.ffn_hidden, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            router,
            experts,
            shared,
        })
    }

    /// Gate computation on plain tensors.
    pub fn gate(&self, u: &Tensor<S>, cfg: &ModelConfig) -> Result<GateMatrix<S>> {
        let mut g = Graph::new();
        let vars = LayerVars::constant(self, &mut g);
        let u = g.constant(u.clone());
        let gates = router_gate(&mut g, vars.router, u, cfg)?;
        Ok(gates.matrix(&g))
    }

    /// Layer forward on plain tensors, returning `h` and the gates.
    pub fn forward(&self, u: &Tensor<S>, cfg: &ModelConfig) -> Result<(Tensor<S>, GateMatrix<S>)> {
        let mut g = Graph::new();
        let vars = LayerVars::constant(self, &mut g);
        let u = g.constant(u.clone());
        let out = moe_layer_forward(&mut g, &vars, u, cfg)?;
        Ok((g.value(out.hidden).clone(), out.gates.matrix(&g)))
    }
}

/// Graph handles for one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub router: Var,
    pub experts: Vec<(Var, Var)>,
    pub shared: Vec<(Var, Var)>,
}

impl LayerVars {
    pub(crate) fn bind<S: Scalar>(layer: &MoELayer<S>, g: &mut Graph<S>) -> Self {
        let mut leaf = |t: &Tensor<S>| g.leaf(detached(t));
        let router = leaf(&layer.router);
        let experts = layer
            .experts
            .iter()
            .map(|e| (leaf(&e.up), leaf(&e.down)))
            .collect();
        let shared = layer
            .shared
            .iter()
            .map(|e| (leaf(&e.up), leaf(&e.down)))
            .collect();
        Self {
            router,
            experts,
            shared,
        }
    }

    pub(crate) fn constant<S: Scalar>(layer: &MoELayer<S>, g: &mut Graph<S>) -> Self {
        let mut c = |t: &Tensor<S>| g.constant(detached(t));
        Self {
            router: c(&layer.router),
            experts: layer.experts.iter().map(|e| (c(&e.up), c(&e.down))).collect(),
            shared: layer.shared.iter().map(|e| (c(&e.up), c(&e.down))).collect(),
        }
    }
}

/// Copy of a parameter's values and trainability flag, without its gradient.
pub(crate) fn detached<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let mut out = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid shape");
    out.set_requires_grad(t.requires_grad());
    out
}

/// Gate values of one layer for a block of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMatrix<S> {
    /// `[T, N]`, zero outside each token's selected experts.
    pub g: Tensor<S>,
    /// Per token, the `K` selected expert indices in ascending order.
    pub selected: Vec<Vec<usize>>,
}

impl<S: Scalar> GateMatrix<S> {
    pub fn num_tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn num_experts(&self) -> usize {
        self.g.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[S] {
        let n = self.num_experts();
        &self.g.data()[t * n..(t + 1) * n]
    }
}

/// Gates as graph nodes, so the anchor loss can differentiate through them.
#[derive(Debug, Clone)]
pub struct LayerGates {
    /// `[T, N]` gate node.
    pub gate: Var,
    /// `[T, N]` pre-selection softmax scores.
    pub scores: Var,
    pub selected: Vec<Vec<usize>>,
}

impl LayerGates {
    pub fn matrix<S: Scalar>(&self, g: &Graph<S>) -> GateMatrix<S> {
        GateMatrix {
            g: g.value(self.gate).clone(),
            selected: self.selected.clone(),
        }
    }
}

/// Indices of the `k` largest entries, ties toward the lower index, returned ascending.
pub fn top_k_indices<S: Scalar>(scores: &[S], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut top = order[..k.min(order.len())].to_vec();
    top.sort_unstable();
    top
}

/// `s = softmax(u . R)`; `g` keeps the top-K entries of `s` per token.
pub fn router_gate<S: Scalar>(g: &mut Graph<S>, router: Var, u: Var, cfg: &ModelConfig) -> Result<LayerGates> {
    let logits = g.matmul(u, router)?;
    let scores = g.softmax(logits, 1)?;
    let n = cfg.experts_per_layer;
    let s = g.value(scores).data();
    let rows = s.len() / n;
    let mut mask = vec![S::zero(); s.len()];
    let mut selected = Vec::with_capacity(rows);
    for t in 0..rows {
        let top = top_k_indices(&s[t * n..(t + 1) * n], cfg.top_k);
        for &i in &top {
            mask[t * n + i] = S::one();
        }
        selected.push(top);
    }
    let mask = g.constant(Tensor::matrix(rows, n, mask)?);
    let mut gate = g.mul(scores, mask)?;
    if cfg.renormalize_gates {
        let mass = g.row_sum(gate)?;
        let inv = g.recip(mass)?;
        gate = g.scale_rows(gate, inv)?;
    }
    Ok(LayerGates {
        gate,
        scores,
        selected,
    })
}

/// Result of one MoE layer inside a graph.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub hidden: Var,
    pub gates: LayerGates,
    /// `(token, expert, ||FFN_expert(u_token)||)` for every routed pair.
    pub expert_norms: Vec<(usize, usize, f64)>,
}

fn ffn<S: Scalar>(g: &mut Graph<S>, x: Var, (up, down): (Var, Var)) -> Result<Var> {
    let h = g.matmul(x, up)?;
    let a = g.silu(h)?;
    g.matmul(a, down)
}

/// `h_t = u_t + sum_i g_{i,t} FFN_i(u_t) + sum_s FFN_s(u_t)`, evaluating only
/// the experts each token was routed to.
pub fn moe_layer_forward<S: Scalar>(
    g: &mut Graph<S>,
    vars: &LayerVars,
    u: Var,
    cfg: &ModelConfig,
) -> Result<LayerOutput> {
    let gates = router_gate(g, vars.router, u, cfg)?;
    let rows = g.shape(u)[0];
    let d = g.shape(u)[1];
    let n = cfg.experts_per_layer;
    let mut routed: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (t, sel) in gates.selected.iter().enumerate() {
        for &i in sel {
            routed[i].push(t);
        }
    }
    let mut hidden = u;
    let mut expert_norms = Vec::new();
    for (i, tokens) in routed.iter().enumerate() {
        if tokens.is_empty() {
            continue;
        }
        let x = g.gather_rows(u, tokens)?;
        let y = ffn(g, x, vars.experts[i])?;
        for (r, &t) in tokens.iter().enumerate() {
            let row = &g.value(y).data()[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            expert_norms.push((t, i, norm));
        }
        let idx: Vec<usize> = tokens.iter().map(|&t| t * n + i).collect();
        let w = g.pick(gates.gate, &idx)?;
        let weighted = g.scale_rows(y, w)?;
        let spread = g.scatter_rows(weighted, tokens, rows)?;
        hidden = g.add(hidden, spread)?;
    }
    for &shared in &vars.shared {
        let y = ffn(g, u, shared)?;
        hidden = g.add(hidden, y)?;
    }
    Ok(LayerOutput {
        hidden,
        gates,
        expert_norms,
    })
}
