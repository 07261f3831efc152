//! The model numerics checked against straightforward scalar re-implementations.

use bls_core::model::{interact_features, sigmoid, InferenceBatch, LocalModel, ModelConfig};
use bls_core::workload::{gen_hetero, BatchShape};
use proptest::prelude::*;

fn config(seed: u64) -> ModelConfig {
    ModelConfig::desk(4, 6, 40, 10, seed)
}

fn batches(cfg: &ModelConfig, seed: u64) -> Vec<InferenceBatch> {
    let shape = BatchShape {
        batch_size: 9,
        num_batches: 2,
        num_dense: cfg.num_dense,
        table_rows: cfg.table_rows.clone(),
    };
    gen_hetero(&shape, 5, seed)
}

/// y[o] = (sum_i w[o][i] * x[i] accumulated left to right) + b[o]
fn matvec(weight: &[f32], bias: &[f32], x: &[f32]) -> Vec<f32> {
    let n_in = x.len();
    let mut y = vec![0.0f32; bias.len()];
    for o in 0..bias.len() {
        let mut acc = 0.0f32;
        let mut i = 0;
        while i < n_in {
            acc += weight[o * n_in + i] * x[i];
            i += 1;
        }
        y[o] = acc + bias[o];
    }
    y
}

fn mlp_oracle(layers: &[(Vec<f32>, Vec<f32>)], x: &[f32], sigmoid_last: bool) -> Vec<f32> {
    let mut cur = x.to_vec();
    for (l, (w, b)) in layers.iter().enumerate() {
        cur = matvec(w, b, &cur);
        let last = l + 1 == layers.len();
        for v in cur.iter_mut() {
            *v = if last && sigmoid_last { sigmoid(*v) } else if *v > 0.0 { *v } else { 0.0 };
        }
    }
    cur
}

#[test]
fn embedding_bags_match_scalar_loop() {
    let cfg = config(3);
    let model = LocalModel::build_full(&cfg).unwrap();
    for b in batches(&cfg, 4) {
        let pooled = model.apply_emb(&b).unwrap();
        for t in 0..cfg.num_tables {
            let table = &model.tables[t].data;
            for s in 0..b.batch_size {
                for e in 0..cfg.emb_dim {
                    let mut acc = 0.0f32;
                    for &row in &b.sparse[t][s] {
                        acc += table[row as usize * cfg.emb_dim + e];
                    }
                    assert_eq!(pooled[t].data[s * cfg.emb_dim + e].to_bits(), acc.to_bits());
                }
            }
        }
    }
}

#[test]
fn mlps_match_matvec_oracle() {
    let cfg = config(5);
    let model = LocalModel::build_full(&cfg).unwrap();
    let bottom: Vec<_> = model.bottom.layers.iter().map(|l| (l.weight.clone(), l.bias.clone())).collect();
    let top: Vec<_> = model.top.layers.iter().map(|l| (l.weight.clone(), l.bias.clone())).collect();
    for b in batches(&cfg, 6) {
        let x = model.bottom_mlp(&b.dense).unwrap();
        for s in 0..b.batch_size {
            let want = mlp_oracle(&bottom, &b.dense[s * 13..(s + 1) * 13], false);
            assert_eq!(&x[s * cfg.emb_dim..(s + 1) * cfg.emb_dim], &want[..]);
        }
        let z: Vec<f32> = (0..top[0].0.len() / top[0].1.len()).map(|i| (i as f32 * 0.37).sin()).collect();
        assert_eq!(model.top.forward(&z), mlp_oracle(&top, &z, true));
    }
}

#[test]
fn whole_forward_matches_composed_oracle() {
    let cfg = config(9);
    let model = LocalModel::build_full(&cfg).unwrap();
    let bottom: Vec<_> = model.bottom.layers.iter().map(|l| (l.weight.clone(), l.bias.clone())).collect();
    let top: Vec<_> = model.top.layers.iter().map(|l| (l.weight.clone(), l.bias.clone())).collect();
    let d = cfg.emb_dim;
    for b in batches(&cfg, 10) {
        let got = model.forward_local(&b).unwrap();
        for s in 0..b.batch_size {
            let x = mlp_oracle(&bottom, &b.dense[s * 13..(s + 1) * 13], false);
            let mut vecs = vec![x.clone()];
            for t in 0..cfg.num_tables {
                let mut v = vec![0.0f32; d];
                for &row in &b.sparse[t][s] {
                    for e in 0..d {
                        v[e] += model.tables[t].data[row as usize * d + e];
                    }
                }
                vecs.push(v);
            }
            let mut z = x.clone();
            for i in 1..vecs.len() {
                for j in 0..i {
                    let mut acc = 0.0f32;
                    for e in 0..d {
                        acc += vecs[i][e] * vecs[j][e];
                    }
                    z.push(acc);
                }
            }
            let p = mlp_oracle(&top, &z, true);
            assert_eq!(got[s].to_bits(), p[0].to_bits());
            assert!((0.0..=1.0).contains(&got[s]));
        }
    }
}

proptest! {
    #[test]
    fn interaction_matches_nested_loops(
        vals in proptest::collection::vec(-4.0f32..4.0, 5 * 3),
    ) {
        let d = 3;
        let x = &vals[0..d];
        let ly: Vec<&[f32]> = vals[d..].chunks(d).collect();
        let z = interact_features(x, &ly).unwrap();
        let all: Vec<&[f32]> = vals.chunks(d).collect();
        let mut want = x.to_vec();
        for i in 0..all.len() {
            for j in 0..all.len() {
                if j < i {
                    let mut acc = 0.0f32;
                    for e in 0..d {
                        acc += all[i][e] * all[j][e];
                    }
                    want.push(acc);
                }
            }
        }
        prop_assert_eq!(z, want);
    }
}
