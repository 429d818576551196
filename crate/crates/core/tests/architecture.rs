mod common;

use std::collections::BTreeMap;

use common::random_collection;
use mtlstm::model::ModelError;
use mtlstm::recurrent::{lstm_step, LstmState};
use mtlstm::{pad_collection, ModelConfig, MultiTaskModel, SampleCollection, Tape, Tensor, Topology};

fn config(k: usize, topology: Topology) -> ModelConfig {
    let mut cfg = ModelConfig::new((0..k).map(|i| 2 + i).collect(), (0..k).map(|i| 6 + i).collect(), 3, 4);
    cfg.topology = topology;
    cfg.init_std = 0.5;
    cfg
}

#[test]
fn isolated_model_equals_independent_classifiers_bitwise() {
    for seed in 0..5u64 {
        let mut cfg = config(3, Topology::isolated(3));
        cfg.gate_self = false;
        let m = MultiTaskModel::new(cfg, seed).unwrap();
        let c = random_collection(&[4, 1, 3], 6, &[2, 3, 4], seed);
        let joint = m.predict(&c).unwrap();
        let originals = c.unpadded();
        for k in 0..3 {
            let mut tape = Tape::new();
            let bound = m.params().bind(&mut tape);
            let p = m.single_task_view(k).forward(&mut tape, &bound, &originals[k]).unwrap();
            let alone = tape.value(p);
            assert!(
                alone.data().iter().zip(joint[k].data()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "task {k}: {alone:?} vs {:?}",
                joint[k]
            );
        }
    }
}

#[test]
fn single_task_multitask_step_is_lstm_step() {
    let mut cfg = config(1, Topology::isolated(1));
    cfg.gate_self = false;
    let m = MultiTaskModel::new(cfg, 3).unwrap();
    let mut tape = Tape::new();
    let bound = m.params().bind(&mut tape);
    let x = tape.leaf(Tensor::vector(vec![0.3, -0.2, 0.9]).unwrap());
    let state = LstmState {
        h: tape.leaf(Tensor::vector(vec![0.1, 0.2, -0.3, 0.4]).unwrap()),
        c: tape.leaf(Tensor::vector(vec![-1.0, 0.5, 0.0, 2.0]).unwrap()),
    };
    let joint = m.multitask_step(&mut tape, &bound, &[x], &[state], &BTreeMap::new(), None).unwrap();
    let plain = lstm_step(&mut tape, &bound, &m.task(0).cell, x, &state).unwrap();
    assert_eq!(tape.value(joint.states[0].h), tape.value(plain.state.h));
    assert_eq!(tape.value(joint.states[0].c), tape.value(plain.state.c));
}

fn max_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y).unwrap()).fold(0.0, f64::max)
}

fn permute_collection(c: &SampleCollection, perm: &[usize]) -> SampleCollection {
    let k = perm.len();
    let mut raw = vec![Vec::new(); k];
    let mut labels = vec![0; k];
    for (old, seq) in c.unpadded().into_iter().enumerate() {
        raw[perm[old]] = seq;
        labels[perm[old]] = c.labels[old];
    }
    pad_collection(raw, labels)
}

#[test]
fn relabeling_tasks_permutes_outputs() {
    let mut topo = Topology::full(3);
    topo.set_coupling(0, 1, false);
    topo.set_local_fusion(1, 2, false);
    for (seed, perm) in [[1, 2, 0], [2, 1, 0], [0, 2, 1]].iter().enumerate() {
        let m = MultiTaskModel::new(config(3, topo.clone()), seed as u64).unwrap();
        let moved = m.relabel_tasks(perm).unwrap();
        let c = random_collection(&[3, 4, 2], 6, &[2, 3, 4], 40 + seed as u64);
        let before = m.predict(&c).unwrap();
        let after = moved.predict(&permute_collection(&c, perm)).unwrap();
        let reordered: Vec<Tensor> = (0..3).map(|old| after[perm[old]].clone()).collect();
        assert!(max_diff(&before, &reordered) < 1e-12, "{perm:?}");
    }
}

#[test]
fn identical_twin_tasks_produce_identical_outputs() {
    let mut cfg = ModelConfig::new(vec![3, 3], vec![7, 7], 3, 3);
    cfg.init_std = 0.5;
    let mut m = MultiTaskModel::new(cfg, 9).unwrap();
    let names: Vec<String> = m.params().entries().iter().map(|e| e.name.clone()).collect();
    for name in &names {
        let twin = if let Some(rest) = name.strip_prefix("task0.") {
            format!("task1.{rest}")
        } else if name == "embed0" {
            "embed1".into()
        } else if name == "coupling.0->1.U_c" {
            "coupling.1->0.U_c".into()
        } else {
            continue;
        };
        let value = m.params().value(m.params().find(name).unwrap()).clone();
        let id = m.params().find(&twin).unwrap();
        m.params_mut().set(id, value);
    }
    for t_len in 1..=4 {
        let seq: Vec<usize> = (0..t_len).map(|i| 1 + (i * 3) % 6).collect();
        let c = pad_collection(vec![seq.clone(), seq], vec![0, 0]);
        let p = m.predict(&c).unwrap();
        assert_eq!(p[0], p[1], "T = {t_len}");
    }
}

#[test]
fn outputs_are_distributions() {
    let m = MultiTaskModel::new(config(3, Topology::full(3)), 1).unwrap();
    for seed in 0..10 {
        let c = random_collection(&[5, 2, 3], 6, &[2, 3, 4], seed);
        for (k, p) in m.predict(&c).unwrap().iter().enumerate() {
            assert_eq!(p.len(), 2 + k);
            assert!((p.sum() - 1.0).abs() < 1e-12);
            assert!(p.data().iter().all(|&v| v > 0.0));
        }
    }
}

#[test]
fn zero_heads_give_uniform_distributions() {
    let mut m = MultiTaskModel::new(config(2, Topology::full(2)), 2).unwrap();
    for k in 0..2 {
        for name in [format!("task{k}.head.W"), format!("task{k}.head.b")] {
            let id = m.params().find(&name).unwrap();
            let shape = m.params().value(id).shape().to_vec();
            m.params_mut().set(id, Tensor::zeros(&shape));
        }
    }
    let p = m.predict(&random_collection(&[3, 3], 6, &[2, 3], 0)).unwrap();
    assert!(p[0].data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    assert!(p[1].data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn zero_cross_weights_leave_gated_self_term() {
    let topo = Topology::uniform(2, true, false, false);
    let m = MultiTaskModel::new(config(2, topo.clone()), 5).unwrap();
    let mut zeroed = m.clone();
    let id = zeroed.params().find("coupling.1->0.U_c").unwrap();
    zeroed.params_mut().set(id, Tensor::zeros(&[4, 4]));
    let mut cut = topo;
    cut.set_coupling(1, 0, false);
    let mut cfg = m.config().clone();
    cfg.topology = cut;
    let mut alone = MultiTaskModel::new(cfg, 0).unwrap();
    for e in m.params().entries() {
        if let Some(id) = alone.params().find(&e.name) {
            alone.params_mut().set(id, e.value.clone());
        }
    }
    let c = random_collection(&[3, 3], 6, &[2, 3], 8);
    let a = zeroed.predict(&c).unwrap();
    let b = alone.predict(&c).unwrap();
    assert!(a[0].max_abs_diff(&b[0]).unwrap() < 1e-15);
}

#[test]
fn saturated_gate_silences_coupling() {
    let topo = Topology::uniform(2, true, false, false);
    let m = MultiTaskModel::new(config(2, topo), 6).unwrap();
    let mut tape = Tape::new();
    let bound = m.params().bind(&mut tape);
    let x = tape.leaf(Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap());
    let h = tape.leaf(Tensor::zeros(&[4]));
    let mut closed = m.clone();
    let id = closed.params().find("task1.W_gc").unwrap();
    closed.params_mut().set(id, Tensor::new(vec![4, 3], vec![-400.0; 12]).unwrap());
    let mut tape2 = Tape::new();
    let bound2 = closed.params().bind(&mut tape2);
    let x2 = tape2.leaf(tape.value(x).clone());
    let h2 = tape2.leaf(tape.value(h).clone());
    let g = closed.coupling_gate(&mut tape2, &bound2, 1, 0, x2, h2).unwrap();
    assert!(tape2.value(g).data().iter().all(|&v| v < 1e-100));
    let open = m.coupling_gate(&mut tape, &bound, 1, 0, x, h).unwrap();
    assert!(tape.value(open).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn structural_errors_are_reported() {
    let mut topo = Topology::full(2);
    topo.set_coupling(0, 1, false);
    let m = MultiTaskModel::new(config(2, topo), 0).unwrap();
    let mut tape = Tape::new();
    let bound = m.params().bind(&mut tape);
    let x = tape.leaf(Tensor::zeros(&[3]));
    let h = tape.leaf(Tensor::zeros(&[4]));
    assert!(matches!(
        m.coupling_gate(&mut tape, &bound, 1, 0, x, h),
        Err(ModelError::DisabledEdge { from: 0, to: 1 })
    ));
    let state = LstmState::zero(&mut tape, 4);
    assert!(matches!(
        m.multitask_step(&mut tape, &bound, &[x], &[state], &BTreeMap::new(), None),
        Err(ModelError::TaskCount { .. })
    ));
    let missing = m.multitask_step(&mut tape, &bound, &[x, x], &[state, state], &BTreeMap::new(), None);
    assert!(matches!(missing, Err(ModelError::MissingFusion(_))));

    let mut c = random_collection(&[2, 2], 6, &[2, 3], 0);
    c.inputs[1].push(0);
    assert!(matches!(m.predict(&c), Err(ModelError::UnequalLengths(_))));
    let bad = pad_collection(vec![vec![1, 2], vec![99]], vec![0, 0]);
    assert!(matches!(m.predict(&bad), Err(ModelError::TokenOutOfRange { task: 1, token: 99, .. })));
}

#[test]
fn gates_lie_strictly_inside_unit_interval() {
    let m = MultiTaskModel::new(config(3, Topology::full(3)), 4).unwrap();
    let c = random_collection(&[4, 4, 2], 6, &[2, 3, 4], 4);
    let mut tape = Tape::new();
    let bound = m.params().bind(&mut tape);
    let pass = m.forward(&mut tape, &bound, &c).unwrap();
    assert!(!pass.gates.is_empty());
    for g in &pass.gates {
        assert!(tape.value(*g).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn checkpoint_file_round_trip_is_exact() {
    let m = MultiTaskModel::new(config(3, Topology::full(3)), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    m.save(&path).unwrap();
    let back = MultiTaskModel::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    for (a, b) in m.params().entries().iter().zip(back.params().entries()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let text = std::fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
    assert!(MultiTaskModel::from_checkpoint(&text).is_err());
}
