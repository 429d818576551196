#![allow(dead_code)]

//! Scalar-loop reference evaluation of the joint model, written directly
//! from the cell equations with plain `Vec<f64>` arithmetic.

use mtlstm::data::PAD;
use mtlstm::{MultiTaskModel, SampleCollection, Tensor};

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `m x` by explicit loops over rows and columns.
pub fn mv(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    assert_eq!(cols, x.len(), "oracle shape mismatch");
    let mut out = vec![0.0; rows];
    for (r, o) in out.iter_mut().enumerate() {
        for (c, xc) in x.iter().enumerate() {
            *o += m.at(r, c) * xc;
        }
    }
    out
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub struct Oracle<'a> {
    pub model: &'a MultiTaskModel,
}

impl<'a> Oracle<'a> {
    pub fn new(model: &'a MultiTaskModel) -> Self {
        Self { model }
    }

    pub fn p(&self, name: &str) -> &Tensor {
        let id = self
            .model
            .params()
            .find(name)
            .unwrap_or_else(|| panic!("oracle: no parameter {name}"));
        self.model.params().value(id)
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.p(name).data().to_vec()
    }

    /// `sigma(W_g x + U_g h + V_g c + b_g)`.
    pub fn gate(&self, cell: &str, g: &str, x: &[f64], h: &[f64], c: &[f64]) -> Vec<f64> {
        let wx = mv(self.p(&format!("{cell}.W_{g}")), x);
        let uh = mv(self.p(&format!("{cell}.U_{g}")), h);
        let vc = mv(self.p(&format!("{cell}.V_{g}")), c);
        let b = self.vec(&format!("{cell}.b_{g}"));
        (0..b.len()).map(|r| sig(wx[r] + uh[r] + vc[r] + b[r])).collect()
    }

    /// One plain cell step; returns `(h, c)`.
    pub fn lstm_step(&self, cell: &str, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let i = self.gate(cell, "i", x, h, c);
        let f = self.gate(cell, "f", x, h, c);
        let o = self.gate(cell, "o", x, h, c);
        let pre = add(&mv(self.p(&format!("{cell}.W_c")), x), &mv(self.p(&format!("{cell}.U_c")), h));
        let cand: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let c_new: Vec<f64> = (0..c.len()).map(|r| f[r] * c[r] + i[r] * cand[r]).collect();
        let h_new: Vec<f64> = (0..c.len()).map(|r| o[r] * c_new[r].tanh()).collect();
        (h_new, c_new)
    }

    pub fn lstm_seq(&self, cell: &str, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.p(&format!("{cell}.U_c")).shape()[0];
        let (mut h, mut c) = (vec![0.0; n], vec![0.0; n]);
        let mut out = Vec::new();
        for x in xs {
            let (h2, c2) = self.lstm_step(cell, x, &h, &c);
            h = h2;
            c = c2;
            out.push(h.clone());
        }
        out
    }

    pub fn bilstm(&self, layer: &str, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let fwd = self.lstm_seq(&format!("{layer}.fwd"), xs);
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let mut bwd = self.lstm_seq(&format!("{layer}.bwd"), &rev);
        bwd.reverse();
        fwd.iter().zip(&bwd).map(|(f, b)| [f.as_slice(), b.as_slice()].concat()).collect()
    }

    fn embed(&self, k: usize, tok: usize) -> Vec<f64> {
        let d = self.model.config().embed_dim;
        if tok == PAD {
            return vec![0.0; d];
        }
        let name = if self.model.config().shared_embeddings {
            "embed".to_string()
        } else {
            format!("embed{k}")
        };
        self.p(&name).data()[tok * d..(tok + 1) * d].to_vec()
    }

    /// Class distributions of every task for one collection.
    pub fn forward(&self, c: &SampleCollection) -> Vec<Vec<f64>> {
        let cfg = self.model.config();
        let topo = &cfg.topology;
        let k_tasks = cfg.tasks();
        let n = cfg.hidden;
        let t_len = c.inputs[0].len();
        let xs: Vec<Vec<Vec<f64>>> = (0..k_tasks)
            .map(|k| c.inputs[k].iter().map(|&tok| self.embed(k, tok)).collect())
            .collect();

        let mut local = std::collections::BTreeMap::new();
        for j in 0..k_tasks {
            for k in j + 1..k_tasks {
                if topo.fused(j, k) {
                    let joined: Vec<Vec<f64>> = (0..t_len).map(|t| [xs[j][t].clone(), xs[k][t].clone()].concat()).collect();
                    local.insert((j, k), self.bilstm(&format!("local.{j}-{k}"), &joined));
                }
            }
        }
        let global = topo.global_fusion().then(|| {
            let joined: Vec<Vec<f64>> = (0..t_len).map(|t| xs.iter().flat_map(|x| x[t].clone()).collect()).collect();
            self.bilstm("global", &joined)
        });

        let mut h = vec![vec![0.0; n]; k_tasks];
        let mut cst = vec![vec![0.0; n]; k_tasks];
        let mut readout = vec![Vec::new(); k_tasks];
        for t in 0..t_len {
            let mut h_next = Vec::new();
            let mut c_next = Vec::new();
            for k in 0..k_tasks {
                let cell = format!("task{k}.lstm");
                let x = &xs[k][t];
                let i = self.gate(&cell, "i", x, &h[k], &cst[k]);
                let f = self.gate(&cell, "f", x, &h[k], &cst[k]);
                let o = self.gate(&cell, "o", x, &h[k], &cst[k]);

                let mut pre = mv(self.p(&format!("{cell}.W_c")), x);
                for j in 0..k_tasks {
                    if !topo.coupled(j, k) {
                        continue;
                    }
                    let u = if j == k {
                        self.p(&format!("{cell}.U_c"))
                    } else {
                        self.p(&format!("coupling.{j}->{k}.U_c"))
                    };
                    let projected = mv(u, &h[j]);
                    let term = if j == k && !cfg.gate_self {
                        projected
                    } else {
                        let g_pre = add(&mv(self.p(&format!("task{k}.W_gc")), x), &mv(self.p(&format!("task{j}.U_gc")), &h[j]));
                        let g: Vec<f64> = g_pre.iter().map(|&v| sig(v)).collect();
                        mul(&g, &projected)
                    };
                    pre = add(&pre, &term);
                }
                for j in 0..k_tasks {
                    if j == k || !topo.fused(j, k) {
                        continue;
                    }
                    let key = (j.min(k), j.max(k));
                    let h_jk = &local[&key][t];
                    let g_pre = add(&mv(self.p(&format!("task{k}.W_gf")), x), &mv(self.p(&format!("task{j}.U_gf")), h_jk));
                    let g: Vec<f64> = g_pre.iter().map(|&v| sig(v)).collect();
                    let projected = mv(self.p(&format!("local.{}-{}.U_c", key.0, key.1)), h_jk);
                    pre = add(&pre, &mul(&g, &projected));
                }
                if let Some(gs) = &global {
                    let h_g = &gs[t];
                    let g_pre = add(&mv(self.p(&format!("task{k}.W_gg")), x), &mv(self.p(&format!("task{k}.U_gg")), h_g));
                    let g: Vec<f64> = g_pre.iter().map(|&v| sig(v)).collect();
                    pre = add(&pre, &mul(&g, &mv(self.p("global.U_c"), h_g)));
                }
                let cand: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
                let c_new: Vec<f64> = (0..n).map(|r| f[r] * cst[k][r] + i[r] * cand[r]).collect();
                let h_new: Vec<f64> = (0..n).map(|r| o[r] * c_new[r].tanh()).collect();
                h_next.push(h_new);
                c_next.push(c_new);
            }
            h = h_next;
            cst = c_next;
            for k in 0..k_tasks {
                if c.lengths[k] == t + 1 {
                    readout[k] = h[k].clone();
                }
            }
        }

        (0..k_tasks)
            .map(|k| {
                let z = add(&mv(self.p(&format!("task{k}.head.W")), &readout[k]), self.p(&format!("task{k}.head.b")).data());
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            })
            .collect()
    }
}

/// Random token collection with the given true lengths.
pub fn random_collection(lengths: &[usize], vocab: usize, classes: &[usize], seed: u64) -> SampleCollection {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let raw = lengths
        .iter()
        .map(|&l| (0..l).map(|_| rng.random_range(1..vocab)).collect())
        .collect();
    let labels = classes.iter().map(|&c| rng.random_range(0..c)).collect();
    mtlstm::pad_collection(raw, labels)
}
