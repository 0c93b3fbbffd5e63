//! The toy MoE sequence model.
//!
//! Token mixing is a causal mean-pool of embeddings added to each token's own
//! embedding; after that every position is processed independently by the
//! stack of MoE layers and projected to the vocabulary by the output head.

mod batch;
mod config;
mod layer;
mod mask;
mod param;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use batch::TokenBatch;
pub use config::ModelConfig;
pub use layer::{
    moe_layer_forward, router_gate, top_k_indices, Expert, GateMatrix, LayerGates, LayerOutput,
    LayerVars, MoELayer,
};
pub use mask::{apply_mask, ParamMask};
pub use param::ParamId;

use crate::analytics::RoutingTrace;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel<S> {
    config: ModelConfig,
    /// `[V, d]`
    pub embed: Tensor<S>,
    pub layers: Vec<MoELayer<S>>,
    /// `[d, V]`
    pub head: Tensor<S>,
}

/// Graph handles for every parameter of a model.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub head: Var,
}

impl ParamVars {
    /// `(id, var)` pairs in the model's canonical parameter order.
    pub fn iter(&self) -> Vec<(ParamId, Var)> {
        let mut out = vec![(ParamId::Embed, self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((ParamId::Router(l), layer.router));
            for (e, &(up, down)) in layer.experts.iter().enumerate() {
                out.push((ParamId::ExpertUp(l, e), up));
                out.push((ParamId::ExpertDown(l, e), down));
            }
            for (s, &(up, down)) in layer.shared.iter().enumerate() {
                out.push((ParamId::SharedUp(l, s), up));
                out.push((ParamId::SharedDown(l, s), down));
            }
        }
        out.push((ParamId::Head, self.head));
        out
    }
}

/// Which positions of a batch go through the MoE layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positions {
    All,
    /// Only the batch's prediction rows.
    Predictions,
}

/// Graph nodes of one model forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Input to the first MoE layer, one row per evaluated position.
    pub input: Var,
    pub layers: Vec<LayerOutput>,
    /// Batch rows evaluated, in order.
    pub rows: Vec<usize>,
}

impl ForwardPass {
    pub fn output(&self) -> Var {
        self.layers.last().map(|l| l.hidden).unwrap_or(self.input)
    }

    /// Hidden state after layer `l`.
    pub fn hidden(&self, l: usize) -> Var {
        self.layers[l].hidden
    }

    /// Splits the recorded gates into per-sequence blocks. Requires a pass
    /// over every position of `batch`.
    pub fn trace<S: Scalar>(&self, g: &Graph<S>, batch: &TokenBatch) -> Result<RoutingTrace<S>> {
        if self.rows.len() != batch.num_tokens() {
            return Err(Error::config("routing trace needs a forward pass over all positions"));
        }
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let gm = layer.gates.matrix(g);
            let n = gm.num_experts();
            let mut seqs = Vec::with_capacity(batch.num_sequences());
            for w in batch.offsets.windows(2) {
                let data = gm.g.data()[w[0] * n..w[1] * n].to_vec();
                seqs.push(Tensor::matrix(w[1] - w[0], n, data)?);
            }
            per_layer.push(seqs);
        }
        RoutingTrace::new(per_layer)
    }
}

impl<S: Scalar> MoEModel<S> {
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let embed = Tensor::randn(vec![config.vocab_size, d], 1.0, &mut rng)?;
        let layers = (0..config.num_layers)
            .map(|_| MoELayer::init(&config, &mut rng))
            .collect::<Result<_>>()?;
        let head = Tensor::randn(vec![d, config.vocab_size], 1.0 / (d as f64).sqrt(), &mut rng)?;
        Ok(Self {
            config,
            embed,
            layers,
            head,
        })
    }

    /// Assembles a model from tensors, checking every shape.
    pub fn from_parts(config: ModelConfig, embed: Tensor<S>, layers: Vec<MoELayer<S>>, head: Tensor<S>) -> Result<Self> {
        config.validate()?;
        let model = Self {
            config,
            embed,
            layers,
            head,
        };
        let template = MoEModel::<S>::shapes(&model.config);
        let actual: Vec<(ParamId, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(id, t)| (id, t.shape().to_vec()))
            .collect();
        if template != actual {
            return Err(Error::Checkpoint("tensor set does not match the model config".into()));
        }
        Ok(model)
    }

    /// Expected `(id, shape)` list for a config, in canonical order.
    pub fn shapes(cfg: &ModelConfig) -> Vec<(ParamId, Vec<usize>)> {
        let (d, h, v) = (cfg.embed_dim, cfg.ffn_hidden, cfg.vocab_size);
        let mut out = vec![(ParamId::Embed, vec![v, d])];
        for l in 0..cfg.num_layers {
            out.push((ParamId::Router(l), vec![d, cfg.experts_per_layer]));
            for e in 0..cfg.experts_per_layer {
                out.push((ParamId::ExpertUp(l, e), vec![d, h]));
                out.push((ParamId::ExpertDown(l, e), vec![h, d]));
            }
            for s in 0..cfg.shared_experts {
                out.push((ParamId::SharedUp(l, s), vec![d, h]));
                out.push((ParamId::SharedDown(l, s), vec![h, d]));
            }
        }
        out.push((ParamId::Head, vec![d, v]));
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.is_finite())
    }

    pub fn named_params(&self) -> Vec<(ParamId, &Tensor<S>)> {
        let mut out = vec![(ParamId::Embed, &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((ParamId::Router(l), &layer.router));
            for (e, ex) in layer.experts.iter().enumerate() {
                out.push((ParamId::ExpertUp(l, e), &ex.up));
                out.push((ParamId::ExpertDown(l, e), &ex.down));
            }
            for (s, ex) in layer.shared.iter().enumerate() {
                out.push((ParamId::SharedUp(l, s), &ex.up));
                out.push((ParamId::SharedDown(l, s), &ex.down));
            }
        }
        out.push((ParamId::Head, &self.head));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(ParamId, &mut Tensor<S>)> {
        let mut out = vec![(ParamId::Embed, &mut self.embed)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((ParamId::Router(l), &mut layer.router));
            for (e, ex) in layer.experts.iter_mut().enumerate() {
                out.push((ParamId::ExpertUp(l, e), &mut ex.up));
                out.push((ParamId::ExpertDown(l, e), &mut ex.down));
            }
            for (s, ex) in layer.shared.iter_mut().enumerate() {
                out.push((ParamId::SharedUp(l, s), &mut ex.up));
                out.push((ParamId::SharedDown(l, s), &mut ex.down));
            }
        }
        out.push((ParamId::Head, &mut self.head));
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        match id {
            ParamId::Embed => Some(&self.embed),
            ParamId::Head => Some(&self.head),
            ParamId::Router(l) => self.layers.get(l).map(|x| &x.router),
            ParamId::ExpertUp(l, e) => self.layers.get(l)?.experts.get(e).map(|x| &x.up),
            ParamId::ExpertDown(l, e) => self.layers.get(l)?.experts.get(e).map(|x| &x.down),
            ParamId::SharedUp(l, e) => self.layers.get(l)?.shared.get(e).map(|x| &x.up),
            ParamId::SharedDown(l, e) => self.layers.get(l)?.shared.get(e).map(|x| &x.down),
        }
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Number of scalars in tensors flagged trainable.
    pub fn num_trainable(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        for (_, t) in self.named_params_mut() {
            t.set_requires_grad(flag);
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    /// Registers every parameter tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph<S>) -> ParamVars {
        let embed = g.leaf(layer::detached(&self.embed));
        let layers = self.layers.iter().map(|l| LayerVars::bind(l, g)).collect();
        let head = g.leaf(layer::detached(&self.head));
        ParamVars {
            embed,
            layers,
            head,
        }
    }

    /// Registers every parameter as a constant; nothing in the graph will
    /// receive a gradient.
    pub fn bind_frozen(&self, g: &mut Graph<S>) -> ParamVars {
        let embed = g.constant(layer::detached(&self.embed));
        let layers = self.layers.iter().map(|l| LayerVars::constant(l, g)).collect();
        let head = g.constant(layer::detached(&self.head));
        ParamVars {
            embed,
            layers,
            head,
        }
    }

    /// Embedding, causal mean-pool mixing and the MoE stack.
    pub fn forward_pass(
        &self,
        g: &mut Graph<S>,
        vars: &ParamVars,
        batch: &TokenBatch,
        positions: Positions,
    ) -> Result<ForwardPass> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let v = self.config.vocab_size;
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "token",
                index: bad,
                bound: v,
            });
        }
        let emb = g.gather_rows(vars.embed, &batch.tokens)?;
        let pooled = g.causal_mean(emb, &batch.offsets)?;
        let mut u = g.add(emb, pooled)?;
        let rows = match positions {
            Positions::All => (0..batch.num_tokens()).collect(),
            Positions::Predictions => {
                u = g.gather_rows(u, &batch.pred_rows)?;
                batch.pred_rows.clone()
            }
        };
        let input = u;
        let mut layers = Vec::with_capacity(self.layers.len());
        for lv in &vars.layers {
            let out = moe_layer_forward(g, lv, u, &self.config)?;
            u = out.hidden;
            layers.push(out);
        }
        Ok(ForwardPass {
            input,
            layers,
            rows,
        })
    }

    /// Vocabulary logits for the batch's prediction rows.
    pub fn prediction_logits(&self, g: &mut Graph<S>, vars: &ParamVars, pass: &ForwardPass, batch: &TokenBatch) -> Result<Var> {
        let out = pass.output();
        let h = if pass.rows == batch.pred_rows {
            out
        } else {
            g.gather_rows(out, &batch.pred_rows)?
        };
        g.matmul(h, vars.head)
    }

    /// Adds graph gradients into the trainable tensors. Trainable tensors the
    /// pass never touched receive an explicit zero gradient.
    pub fn accumulate_grads(&mut self, g: &Graph<S>, vars: &ParamVars) -> Result<()> {
        let pairs = vars.iter();
        for ((id, tensor), (vid, var)) in self.named_params_mut().into_iter().zip(pairs) {
            debug_assert_eq!(id, vid);
            if !tensor.requires_grad() {
                continue;
            }
            match g.grad(var) {
                Some(grad) => tensor.accumulate_grad(grad)?,
                None => tensor.accumulate_grad(&vec![S::zero(); tensor.numel()])?,
            }
        }
        Ok(())
    }

    /// Logits `[T, V]` for every position of one sequence, plus its routing.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Tensor<S>, RoutingTrace<S>)> {
        let mut batch = TokenBatch::new();
        batch.push_plain(tokens)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let pass = self.forward_pass(&mut g, &vars, &batch, Positions::All)?;
        let logits = g.matmul(pass.output(), vars.head)?;
        let trace = pass.trace(&g, &batch)?;
        Ok((g.value(logits).clone(), trace))
    }

    /// Routing of every position in `batch`.
    pub fn trace(&self, batch: &TokenBatch) -> Result<RoutingTrace<S>> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let pass = self.forward_pass(&mut g, &vars, batch, Positions::All)?;
        pass.trace(&g, batch)
    }

    /// Routing of every position plus, in the same layout, the output norm
    /// of each routed expert (zero where a token skipped the expert).
    pub fn trace_with_norms(&self, batch: &TokenBatch) -> Result<(RoutingTrace<S>, Vec<Vec<Tensor<f64>>>)> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let pass = self.forward_pass(&mut g, &vars, batch, Positions::All)?;
        let trace = pass.trace(&g, batch)?;
        let n = self.config.experts_per_layer;
        let mut norms = Vec::with_capacity(pass.layers.len());
        for layer in &pass.layers {
            let mut flat = vec![0.0; batch.num_tokens() * n];
            for &(t, e, norm) in &layer.expert_norms {
                flat[t * n + e] = norm;
            }
            let blocks = batch
                .offsets
                .windows(2)
                .map(|w| Tensor::matrix(w[1] - w[0], n, flat[w[0] * n..w[1] * n].to_vec()))
                .collect::<Result<Vec<_>>>()?;
            norms.push(blocks);
        }
        Ok((trace, norms))
    }

    /// Hidden states after layer `l` at every position, `[T, d]`.
    pub fn hidden_states(&self, batch: &TokenBatch, l: usize) -> Result<Tensor<S>> {
        if l >= self.layers.len() {
            return Err(Error::Index {
                what: "layer",
                index: l,
                bound: self.layers.len(),
            });
        }
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let pass = self.forward_pass(&mut g, &vars, batch, Positions::All)?;
        Ok(layer::detached(g.value(pass.hidden(l))))
    }

    /// Teacher-forced argmax at every prediction row.
    ///
    /// A greedy decode reproduces an answer exactly iff every one of these
    /// argmaxes is correct, so exact-match scoring only needs this pass.
    pub fn predict(&self, batch: &TokenBatch) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let pass = self.forward_pass(&mut g, &vars, batch, Positions::Predictions)?;
        let logits = self.prediction_logits(&mut g, &vars, &pass, batch)?;
        let v = self.config.vocab_size;
        Ok(g.value(logits).data().chunks(v).map(argmax).collect())
    }

    /// Appends `steps` greedily chosen tokens to `prompt`.
    pub fn greedy_decode(&self, prompt: &[usize], steps: usize) -> Result<Vec<usize>> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (logits, _) = self.forward(&seq)?;
            let v = self.config.vocab_size;
            let last = &logits.data()[logits.numel() - v..];
            let next = argmax(last);
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
