//! Joint multi-task recurrent classifier.
//!
//! Each task owns a peephole LSTM ("single layer") whose candidate memory
//! receives three kinds of extra input:
//!
//! * coupling: gated projections of every coupled task's previous hidden
//!   state, `sum_j g(j->k) * (U_c(j->k) h_{t-1}(j))` with
//!   `g(j->k) = sigmoid(W_gc(k) x_t(k) + U_gc(j) h_{t-1}(j))`;
//! * local fusion: for every fused pair, a shared bidirectional LSTM over
//!   `x(j) ++ x(k)` whose output is gated into both tasks;
//! * global fusion: one bidirectional LSTM over all inputs concatenated.
//!
//! The fusion layers depend on the whole sequence and are computed before
//! the per-task recurrence.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::data::{SampleCollection, PAD};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::recurrent::{self, apply_cell, lstm_gates, LstmParams, LstmState};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("expected {expected} tasks, got {got}")]
    TaskCount { expected: usize, got: usize },
    #[error("task sequences have unequal padded lengths {0:?}")]
    UnequalLengths(Vec<usize>),
    #[error("token id {token} of task {task} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { task: usize, token: usize, vocab: usize },
    #[error("coupling edge {from}->{to} is disabled")]
    DisabledEdge { from: usize, to: usize },
    #[error("missing fusion output: {0}")]
    MissingFusion(String),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which task interactions are active.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    tasks: usize,
    /// `coupling[j][k]`: hidden state of task `j` feeds task `k`.
    coupling: Vec<Vec<bool>>,
    local_fusion: Vec<Vec<bool>>,
    global_fusion: bool,
}

impl Topology {
    pub fn new(
        coupling: Vec<Vec<bool>>,
        local_fusion: Vec<Vec<bool>>,
        global_fusion: bool,
    ) -> Result<Self> {
        let tasks = coupling.len();
        if tasks == 0 {
            return Err(ModelError::Topology("at least one task is required".into()));
        }
        for (name, m) in [("coupling", &coupling), ("local_fusion", &local_fusion)] {
            if m.len() != tasks || m.iter().any(|row| row.len() != tasks) {
                return Err(ModelError::Topology(format!("{name} matrix must be {tasks}x{tasks}")));
            }
        }
        let mut coupling = coupling;
        for (k, row) in coupling.iter_mut().enumerate() {
            row[k] = true;
        }
        for j in 0..tasks {
            if local_fusion[j][j] {
                return Err(ModelError::Topology(format!("local fusion diagonal set at task {j}")));
            }
            for k in 0..tasks {
                if local_fusion[j][k] != local_fusion[k][j] {
                    return Err(ModelError::Topology(format!(
                        "local fusion matrix not symmetric at ({j}, {k})"
                    )));
                }
            }
        }
        Ok(Self {
            tasks,
            coupling,
            local_fusion,
            global_fusion,
        })
    }

    /// Every interaction enabled.
    pub fn full(tasks: usize) -> Self {
        Self::uniform(tasks, true, true, true)
    }

    /// No interactions: K independent single layers.
    pub fn isolated(tasks: usize) -> Self {
        Self::uniform(tasks, false, false, false)
    }

    pub fn uniform(tasks: usize, coupling: bool, local_fusion: bool, global_fusion: bool) -> Self {
        let coupling = (0..tasks)
            .map(|j| (0..tasks).map(|k| j == k || coupling).collect())
            .collect();
        let local = (0..tasks)
            .map(|j| (0..tasks).map(|k| j != k && local_fusion).collect())
            .collect();
        Self {
            tasks,
            coupling,
            local_fusion: local,
            global_fusion: global_fusion && tasks > 0,
        }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    /// Whether task `from` feeds task `to` (always true on the diagonal).
    pub fn coupled(&self, from: usize, to: usize) -> bool {
        self.coupling[from][to]
    }

    pub fn fused(&self, j: usize, k: usize) -> bool {
        self.local_fusion[j][k]
    }

    pub fn global_fusion(&self) -> bool {
        self.global_fusion
    }

    pub fn set_coupling(&mut self, from: usize, to: usize, enabled: bool) {
        if from != to {
            self.coupling[from][to] = enabled;
        }
    }

    pub fn set_local_fusion(&mut self, j: usize, k: usize, enabled: bool) {
        if j != k {
            self.local_fusion[j][k] = enabled;
            self.local_fusion[k][j] = enabled;
        }
    }

    pub fn set_global_fusion(&mut self, enabled: bool) {
        self.global_fusion = enabled;
    }

    /// Enabled off-diagonal coupling edges `(from, to)`.
    pub fn coupling_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for j in 0..self.tasks {
            for k in 0..self.tasks {
                if j != k && self.coupling[j][k] {
                    out.push((j, k));
                }
            }
        }
        out
    }

    /// Enabled fusion pairs `(j, k)` with `j < k`.
    pub fn local_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for j in 0..self.tasks {
            for k in j + 1..self.tasks {
                if self.local_fusion[j][k] {
                    out.push((j, k));
                }
            }
        }
        out
    }

    pub fn has_interactions(&self) -> bool {
        self.global_fusion || !self.coupling_edges().is_empty() || !self.local_pairs().is_empty()
    }

    /// Relabels tasks so that old task `i` becomes task `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.tasks;
        let mut coupling = vec![vec![false; n]; n];
        let mut local = vec![vec![false; n]; n];
        for j in 0..n {
            for k in 0..n {
                coupling[perm[j]][perm[k]] = self.coupling[j][k];
                local[perm[j]][perm[k]] = self.local_fusion[j][k];
            }
        }
        Self {
            tasks: n,
            coupling,
            local_fusion: local,
            global_fusion: self.global_fusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub class_counts: Vec<usize>,
    pub vocab_sizes: Vec<usize>,
    pub embed_dim: usize,
    pub hidden: usize,
    pub topology: Topology,
    /// Gate the self term of the coupling sum; `false` restores the plain
    /// `U_c h_{t-1}` of an isolated LSTM.
    pub gate_self: bool,
    /// One embedding table for all tasks instead of one per task.
    pub shared_embeddings: bool,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn new(class_counts: Vec<usize>, vocab_sizes: Vec<usize>, embed_dim: usize, hidden: usize) -> Self {
        let k = class_counts.len();
        Self {
            class_counts,
            vocab_sizes,
            embed_dim,
            hidden,
            topology: Topology::full(k),
            gate_self: true,
            shared_embeddings: false,
            init_std: 0.1,
        }
    }

    pub fn tasks(&self) -> usize {
        self.class_counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.tasks();
        if k == 0 {
            return Err(ModelError::Config("no tasks".into()));
        }
        if self.vocab_sizes.len() != k {
            return Err(ModelError::Config(format!(
                "{} vocabulary sizes for {k} tasks",
                self.vocab_sizes.len()
            )));
        }
        if self.topology.tasks() != k {
            return Err(ModelError::Config(format!(
                "topology has {} tasks, model has {k}",
                self.topology.tasks()
            )));
        }
        if let Some(c) = self.class_counts.iter().find(|&&c| c < 2) {
            return Err(ModelError::Config(format!("class count {c} < 2")));
        }
        if self.vocab_sizes.iter().any(|&v| v < 2) {
            return Err(ModelError::Config("vocabulary must hold at least PAD and UNK".into()));
        }
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(ModelError::Config("init_std must be positive".into()));
        }
        if self.shared_embeddings && self.vocab_sizes.iter().any(|&v| v != self.vocab_sizes[0]) {
            return Err(ModelError::Config("shared embeddings need one common vocabulary".into()));
        }
        Ok(())
    }
}

/// Per-task parameters: the single layer, its softmax head and the
/// task-indexed gate matrices shared across interaction edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLayer {
    pub embedding: ParamId,
    pub cell: LstmParams,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Receiver-side coupling gate input weights.
    pub w_gc: Option<ParamId>,
    /// Sender-side coupling gate recurrent weights.
    pub u_gc: Option<ParamId>,
    pub w_gf: Option<ParamId>,
    pub u_gf: Option<ParamId>,
    pub w_gg: Option<ParamId>,
    pub u_gg: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionLayer {
    pub forward: LstmParams,
    pub backward: LstmParams,
    /// Projection of the `2n` bidirectional output into the candidate.
    pub u_c: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel {
    config: ModelConfig,
    store: ParamStore,
    tasks: Vec<TaskLayer>,
    coupling: BTreeMap<(usize, usize), ParamId>,
    local: BTreeMap<(usize, usize), FusionLayer>,
    global: Option<FusionLayer>,
}

/// Activations of one joint forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub probs: Vec<Var>,
    pub logits: Vec<Var>,
    /// Hidden state read out for each task (at its true last position).
    pub readout: Vec<Var>,
    /// Every gate vector produced: LSTM gates, coupling gates, fusion gates
    /// and the global fusion gate.
    pub gates: Vec<Var>,
}

/// Outputs of one time step of the joint recurrence.
#[derive(Debug, Clone)]
pub struct JointStep {
    pub states: Vec<LstmState>,
    pub candidates: Vec<Var>,
    pub gates: Vec<Var>,
}

fn fusion_layer(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> FusionLayer {
    let forward = LstmParams::init(store, &format!("{prefix}.fwd"), input, hidden, std, rng);
    let backward = LstmParams::init(store, &format!("{prefix}.bwd"), input, hidden, std, rng);
    let u_c = store.add_random(
        format!("{prefix}.U_c"),
        ParamKind::Weight,
        &[hidden, 2 * hidden],
        std,
        rng,
    );
    FusionLayer {
        forward,
        backward,
        u_c,
    }
}

impl MultiTaskModel {
    /// Builds a model with truncated-normal parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k_tasks = config.tasks();
        let (d, n, std) = (config.embed_dim, config.hidden, config.init_std);
        let topo = config.topology.clone();

        let new_table = |store: &mut ParamStore, name: String, vocab: usize, rng: &mut ChaCha8Rng| {
            let id = store.add_random(name, ParamKind::Embedding, &[vocab, d], std, rng);
            for v in &mut store.value_mut(id).data_mut()[PAD * d..(PAD + 1) * d] {
                *v = 0.0;
            }
            id
        };
        let shared_table = config
            .shared_embeddings
            .then(|| new_table(&mut store, "embed".to_string(), config.vocab_sizes[0], &mut rng));

        let mut tasks = Vec::with_capacity(k_tasks);
        for k in 0..k_tasks {
            let p = format!("task{k}");
            let embedding = match shared_table {
                Some(id) => id,
                None => new_table(&mut store, format!("embed{k}"), config.vocab_sizes[k], &mut rng),
            };
            let cell = LstmParams::init(&mut store, &format!("{p}.lstm"), d, n, std, &mut rng);
            let c = config.class_counts[k];
            let head_w = store.add_random(format!("{p}.head.W"), ParamKind::Weight, &[c, n], std, &mut rng);
            let head_b = store.add_random(format!("{p}.head.b"), ParamKind::Bias, &[c], std, &mut rng);

            let receives = (0..k_tasks).any(|j| j != k && topo.coupled(j, k));
            let sends = (0..k_tasks).any(|j| j != k && topo.coupled(k, j));
            let fused = (0..k_tasks).any(|j| topo.fused(j, k));
            let mut weight = |name: &str, shape: &[usize], on: bool| {
                on.then(|| store.add_random(format!("{p}.{name}"), ParamKind::Weight, shape, std, &mut rng))
            };
            let w_gc = weight("W_gc", &[n, d], config.gate_self || receives);
            let u_gc = weight("U_gc", &[n, n], config.gate_self || sends);
            let w_gf = weight("W_gf", &[n, d], fused);
            let u_gf = weight("U_gf", &[n, 2 * n], fused);
            let w_gg = weight("W_gg", &[n, d], topo.global_fusion());
            let u_gg = weight("U_gg", &[n, 2 * n], topo.global_fusion());
            tasks.push(TaskLayer {
                embedding,
                cell,
                head_w,
                head_b,
                w_gc,
                u_gc,
                w_gf,
                u_gf,
                w_gg,
                u_gg,
            });
        }

        let mut coupling = BTreeMap::new();
        for (j, k) in topo.coupling_edges() {
            let id = store.add_random(format!("coupling.{j}->{k}.U_c"), ParamKind::Weight, &[n, n], std, &mut rng);
            coupling.insert((j, k), id);
        }
        let mut local = BTreeMap::new();
        for (j, k) in topo.local_pairs() {
            let layer = fusion_layer(&mut store, &format!("local.{j}-{k}"), 2 * d, n, std, &mut rng);
            local.insert((j, k), layer);
        }
        let global = topo
            .global_fusion()
            .then(|| fusion_layer(&mut store, "global", k_tasks * d, n, std, &mut rng));

        Ok(Self {
            config,
            store,
            tasks,
            coupling,
            local,
            global,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.config.topology
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn task(&self, k: usize) -> &TaskLayer {
        &self.tasks[k]
    }

    pub fn coupling_weight(&self, from: usize, to: usize) -> Option<ParamId> {
        if from == to {
            Some(self.tasks[to].cell.u_c)
        } else {
            self.coupling.get(&(from, to)).copied()
        }
    }

    pub fn local_fusion(&self, j: usize, k: usize) -> Option<&FusionLayer> {
        self.local.get(&(j.min(k), j.max(k)))
    }

    pub fn global_fusion(&self) -> Option<&FusionLayer> {
        self.global.as_ref()
    }

    /// `sigmoid(W_gc(to) x_t(to) + U_gc(from) h_{t-1}(from))`.
    pub fn coupling_gate(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        to: usize,
        from: usize,
        x_to: Var,
        h_prev_from: Var,
    ) -> Result<Var> {
        let enabled = if from == to {
            self.config.gate_self
        } else {
            self.config.topology.coupled(from, to)
        };
        let (Some(w), Some(u)) = (self.tasks[to].w_gc, self.tasks[from].u_gc) else {
            return Err(ModelError::DisabledEdge { from, to });
        };
        if !enabled {
            return Err(ModelError::DisabledEdge { from, to });
        }
        let wx = tape.matmul(bound.var(w), x_to)?;
        let uh = tape.matmul(bound.var(u), h_prev_from)?;
        let pre = tape.add(wx, uh)?;
        Ok(tape.sigmoid(pre)?)
    }

    /// Candidate memory of task `k`:
    /// `tanh(W_c x + coupling + local fusion + global fusion)`.
    ///
    /// `local` maps each enabled pair `(j, k)` with `j < k` to its
    /// bidirectional output at this step; `global` is required iff global
    /// fusion is enabled. Gate activations are appended to `gates`.
    #[allow(clippy::too_many_arguments)]
    pub fn candidate_memory(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        k: usize,
        x_k: Var,
        h_prev: &[Var],
        local: &BTreeMap<(usize, usize), Var>,
        global: Option<Var>,
        gates: &mut Vec<Var>,
    ) -> Result<Var> {
        let topo = &self.config.topology;
        let task = &self.tasks[k];
        let wx = tape.matmul(bound.var(task.cell.w_c), x_k)?;

        let mut coupling_terms = Vec::new();
        for (j, &h_j) in h_prev.iter().enumerate() {
            if !topo.coupled(j, k) {
                continue;
            }
            let u = self.coupling_weight(j, k).expect("enabled edge has a weight");
            let projected = tape.matmul(bound.var(u), h_j)?;
            if j == k && !self.config.gate_self {
                coupling_terms.push(projected);
            } else {
                let g = self.coupling_gate(tape, bound, k, j, x_k, h_j)?;
                gates.push(g);
                coupling_terms.push(tape.mul(g, projected)?);
            }
        }
        let coupling = tape.add_all(&coupling_terms)?;
        let mut pre = tape.add(wx, coupling)?;

        let mut fusion_terms = Vec::new();
        for j in (0..self.tasks.len()).filter(|&j| j != k && topo.fused(j, k)) {
            let key = (j.min(k), j.max(k));
            let h_jk = *local
                .get(&key)
                .ok_or_else(|| ModelError::MissingFusion(format!("local fusion {}-{}", key.0, key.1)))?;
            let layer = &self.local[&key];
            let (w, u) = (
                task.w_gf.expect("fused task has W_gf"),
                self.tasks[j].u_gf.expect("fused task has U_gf"),
            );
            let wx = tape.matmul(bound.var(w), x_k)?;
            let uh = tape.matmul(bound.var(u), h_jk)?;
            let gate_pre = tape.add(wx, uh)?;
            let g = tape.sigmoid(gate_pre)?;
            gates.push(g);
            let projected = tape.matmul(bound.var(layer.u_c), h_jk)?;
            fusion_terms.push(tape.mul(g, projected)?);
        }
        if !fusion_terms.is_empty() {
            let lf = tape.add_all(&fusion_terms)?;
            pre = tape.add(pre, lf)?;
        }

        match (&self.global, global) {
            (Some(layer), Some(h_g)) => {
                let (w, u) = (task.w_gg.expect("W_gg"), task.u_gg.expect("U_gg"));
                let wx = tape.matmul(bound.var(w), x_k)?;
                let uh = tape.matmul(bound.var(u), h_g)?;
                let gate_pre = tape.add(wx, uh)?;
                let g = tape.sigmoid(gate_pre)?;
                gates.push(g);
                let projected = tape.matmul(bound.var(layer.u_c), h_g)?;
                let gf = tape.mul(g, projected)?;
                pre = tape.add(pre, gf)?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(ModelError::MissingFusion("global fusion output".into())),
            (None, Some(_)) => {
                return Err(ModelError::MissingFusion(
                    "global fusion output given but global fusion is disabled".into(),
                ))
            }
        }
        Ok(tape.tanh(pre)?)
    }

    /// Advances every task's cell by one step. Fusion outputs for this step
    /// must already be computed.
    pub fn multitask_step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: &[Var],
        states: &[LstmState],
        local: &BTreeMap<(usize, usize), Var>,
        global: Option<Var>,
    ) -> Result<JointStep> {
        let k_tasks = self.tasks.len();
        if inputs.len() != k_tasks {
            return Err(ModelError::TaskCount {
                expected: k_tasks,
                got: inputs.len(),
            });
        }
        if states.len() != k_tasks {
            return Err(ModelError::TaskCount {
                expected: k_tasks,
                got: states.len(),
            });
        }
        let h_prev: Vec<Var> = states.iter().map(|s| s.h).collect();
        let mut gates = Vec::new();
        let mut next = Vec::with_capacity(k_tasks);
        let mut candidates = Vec::with_capacity(k_tasks);
        for k in 0..k_tasks {
            let g = lstm_gates(tape, bound, &self.tasks[k].cell, inputs[k], &states[k])?;
            gates.extend([g.input, g.forget, g.output]);
            let cand = self.candidate_memory(tape, bound, k, inputs[k], &h_prev, local, global, &mut gates)?;
            candidates.push(cand);
            next.push(apply_cell(tape, &g, cand, states[k].c)?);
        }
        Ok(JointStep {
            states: next,
            candidates,
            gates,
        })
    }

    fn check_collection(&self, c: &SampleCollection) -> Result<usize> {
        let k_tasks = self.tasks.len();
        if c.inputs.len() != k_tasks {
            return Err(ModelError::TaskCount {
                expected: k_tasks,
                got: c.inputs.len(),
            });
        }
        let lens: Vec<usize> = c.inputs.iter().map(Vec::len).collect();
        let t = lens[0];
        if t == 0 || lens.iter().any(|&l| l != t) {
            return Err(ModelError::UnequalLengths(lens));
        }
        if c.lengths.len() != k_tasks || c.lengths.iter().any(|&l| l == 0 || l > t) {
            return Err(ModelError::UnequalLengths(c.lengths.clone()));
        }
        for (k, seq) in c.inputs.iter().enumerate() {
            let vocab = self.config.vocab_sizes[k];
            if let Some(&token) = seq.iter().find(|&&tok| tok >= vocab) {
                return Err(ModelError::TokenOutOfRange { task: k, token, vocab });
            }
        }
        Ok(t)
    }

    /// Embeds, runs the fusion pre-pass and the joint recurrence, then
    /// applies each task's softmax head to its hidden state at the task's
    /// true final position.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, collection: &SampleCollection) -> Result<ForwardPass> {
        let t_len = self.check_collection(collection)?;
        let k_tasks = self.tasks.len();
        let d = self.config.embed_dim;
        let n = self.config.hidden;

        let pad = tape.leaf(Tensor::zeros(&[d]));
        let mut xs: Vec<Vec<Var>> = Vec::with_capacity(k_tasks);
        for (k, seq) in collection.inputs.iter().enumerate() {
            let table = bound.var(self.tasks[k].embedding);
            let row = seq
                .iter()
                .map(|&tok| if tok == PAD { Ok(pad) } else { tape.row(table, tok) })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            xs.push(row);
        }

        let mut local_seq = BTreeMap::new();
        for (&(j, k), layer) in &self.local {
            let joined = (0..t_len)
                .map(|t| tape.concat(&[xs[j][t], xs[k][t]]))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let out = recurrent::bilstm_forward(tape, bound, &layer.forward, &layer.backward, &joined)?;
            local_seq.insert((j, k), out);
        }
        let global_seq = match &self.global {
            Some(layer) => {
                let joined = (0..t_len)
                    .map(|t| {
                        let parts: Vec<Var> = xs.iter().map(|x| x[t]).collect();
                        tape.concat(&parts)
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Some(recurrent::bilstm_forward(tape, bound, &layer.forward, &layer.backward, &joined)?)
            }
            None => None,
        };

        let mut states: Vec<LstmState> = (0..k_tasks).map(|_| LstmState::zero(tape, n)).collect();
        let mut readout = vec![None; k_tasks];
        let mut gates = Vec::new();
        for t in 0..t_len {
            let inputs: Vec<Var> = xs.iter().map(|x| x[t]).collect();
            let local_t: BTreeMap<(usize, usize), Var> =
                local_seq.iter().map(|(&key, seq)| (key, seq[t])).collect();
            let global_t = global_seq.as_ref().map(|seq| seq[t]);
            let step = self.multitask_step(tape, bound, &inputs, &states, &local_t, global_t)?;
            gates.extend(step.gates);
            states = step.states;
            for k in 0..k_tasks {
                if collection.lengths[k] == t + 1 {
                    readout[k] = Some(states[k].h);
                }
            }
        }

        let readout: Vec<Var> = readout.into_iter().map(|h| h.expect("length checked")).collect();
        let mut logits = Vec::with_capacity(k_tasks);
        let mut probs = Vec::with_capacity(k_tasks);
        for (k, &h) in readout.iter().enumerate() {
            let task = &self.tasks[k];
            let wh = tape.matmul(bound.var(task.head_w), h)?;
            let z = tape.add(wh, bound.var(task.head_b))?;
            logits.push(z);
            probs.push(tape.softmax(z)?);
        }
        Ok(ForwardPass {
            probs,
            logits,
            readout,
            gates,
        })
    }

    /// Class distributions for one collection, without keeping the tape.
    pub fn predict(&self, collection: &SampleCollection) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let pass = self.forward(&mut tape, &bound, collection)?;
        Ok(pass.probs.iter().map(|&p| tape.value(p).clone()).collect())
    }

    /// The isolated classifier of task `k`: its embedding, cell and head.
    pub fn single_task_view(&self, k: usize) -> SingleTaskClassifier {
        let t = &self.tasks[k];
        SingleTaskClassifier {
            embedding: t.embedding,
            cell: t.cell,
            head_w: t.head_w,
            head_b: t.head_b,
        }
    }

    /// A copy with tasks relabeled so old task `i` becomes task `perm[i]`.
    /// Fusion input weights are re-blocked to follow the new concatenation
    /// order, so outputs are permuted exactly.
    pub fn relabel_tasks(&self, perm: &[usize]) -> Result<Self> {
        let k_tasks = self.tasks.len();
        let mut seen = vec![false; k_tasks];
        if perm.len() != k_tasks || perm.iter().any(|&p| p >= k_tasks || std::mem::replace(&mut seen[p], true)) {
            return Err(ModelError::Config(format!("{perm:?} is not a permutation of {k_tasks} tasks")));
        }
        let mut config = self.config.clone();
        config.topology = self.config.topology.permuted(perm);
        for k in 0..k_tasks {
            config.class_counts[perm[k]] = self.config.class_counts[k];
            config.vocab_sizes[perm[k]] = self.config.vocab_sizes[k];
        }
        let mut out = Self::new(config, 0)?;
        let d = self.config.embed_dim;
        let renamed = |name: &str| -> (String, Option<Reblock>) {
            let task = |s: &str| s.parse::<usize>().map(|i| perm[i]).unwrap_or(usize::MAX);
            if let Some(rest) = name.strip_prefix("task") {
                let (idx, tail) = rest.split_once('.').unwrap();
                return (format!("task{}.{tail}", task(idx)), None);
            }
            if let Some(idx) = name.strip_prefix("embed") {
                if idx.is_empty() {
                    return (name.to_string(), None);
                }
                return (format!("embed{}", task(idx)), None);
            }
            if let Some(rest) = name.strip_prefix("coupling.") {
                let (edge, tail) = rest.split_once('.').unwrap();
                let (j, k) = edge.split_once("->").unwrap();
                return (format!("coupling.{}->{}.{tail}", task(j), task(k)), None);
            }
            if let Some(rest) = name.strip_prefix("local.") {
                let (pair, tail) = rest.split_once('.').unwrap();
                let (j, k) = pair.split_once('-').unwrap();
                let (a, b) = (task(j), task(k));
                let is_input = tail.ends_with(".W_i") || tail.ends_with(".W_f") || tail.ends_with(".W_o") || tail.ends_with(".W_c");
                let reblock = (a > b && is_input).then(|| Reblock(vec![1, 0]));
                return (format!("local.{}-{}.{tail}", a.min(b), a.max(b)), reblock);
            }
            if let Some(tail) = name.strip_prefix("global.") {
                let is_input = tail.ends_with(".W_i") || tail.ends_with(".W_f") || tail.ends_with(".W_o") || tail.ends_with(".W_c");
                if is_input {
                    // new block perm[k] holds old block k
                    let mut order = vec![0; k_tasks];
                    for k in 0..k_tasks {
                        order[perm[k]] = k;
                    }
                    return (name.to_string(), Some(Reblock(order)));
                }
            }
            (name.to_string(), None)
        };
        for entry in self.store.entries() {
            let (name, reblock) = renamed(&entry.name);
            let id = out
                .store
                .find(&name)
                .ok_or_else(|| ModelError::Config(format!("no counterpart for {}", entry.name)))?;
            let value = match reblock {
                Some(r) => r.apply(&entry.value, d),
                None => entry.value.clone(),
            };
            out.store.set(id, value);
        }
        Ok(out)
    }
}

/// Column-block reordering: output block `i` is input block `order[i]`.
struct Reblock(Vec<usize>);

impl Reblock {
    fn apply(&self, m: &Tensor, block: usize) -> Tensor {
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &src in &self.0 {
                let start = r * cols + src * block;
                data.extend_from_slice(&m.data()[start..start + block]);
            }
        }
        Tensor::from_parts(vec![rows, cols], data)
    }
}

/// An ordinary LSTM text classifier: embed, unroll, classify the last state.
#[derive(Debug, Clone, Copy)]
pub struct SingleTaskClassifier {
    pub embedding: ParamId,
    pub cell: LstmParams,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl SingleTaskClassifier {
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, tokens: &[usize]) -> Result<Var> {
        let d = self.cell.input_size;
        let table = bound.var(self.embedding);
        let xs = tokens
            .iter()
            .map(|&tok| {
                if tok == PAD {
                    Ok(tape.leaf(Tensor::zeros(&[d])))
                } else {
                    tape.row(table, tok)
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let states = recurrent::lstm_forward(tape, bound, &self.cell, &xs, None)?;
        let h = states.last().expect("non-empty").h;
        let wh = tape.matmul(bound.var(self.head_w), h)?;
        let z = tape.add(wh, bound.var(self.head_b))?;
        Ok(tape.softmax(z)?)
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    params: Vec<crate::params::ParamEntry>,
}

impl MultiTaskModel {
    /// Serializes configuration and every parameter as JSON. Floats are
    /// written in shortest round-trip form, so loading is bit-exact.
    pub fn to_checkpoint(&self) -> Result<String> {
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.store.entries().to_vec(),
        };
        serde_json::to_string_pretty(&ck).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format version {}",
                ck.format_version
            )));
        }
        let mut model = Self::new(ck.config, 0)?;
        if ck.params.len() != model.store.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                ck.params.len()
            )));
        }
        for (id, entry) in model.store.ids().collect::<Vec<_>>().into_iter().zip(ck.params) {
            let want = model.store.entry(id);
            if want.name != entry.name || want.kind != entry.kind || want.value.shape() != entry.value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {} does not match {} {:?}",
                    entry.name,
                    want.name,
                    want.value.shape()
                )));
            }
            let value = Tensor::new(entry.value.shape().to_vec(), entry.value.into_data())?;
            model.store.set(id, value);
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()?).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(&text)
    }
}
