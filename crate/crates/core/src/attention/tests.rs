use super::*;
use crate::numerics::RngStream;
use crate::rope::RopeLayout;
use crate::simplex::{SimplexPool, VertexAssignment};
use crate::topology::{causal_hub_mask, StreamTopology};

fn rand_tensor(rng: &mut RngStream, s: usize, d: usize) -> Tensor<f32> {
    Tensor::from_fn(&[s, d], |_| rng.normal())
}

fn per_query_loop(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, mask: &MaskMatrix) -> Vec<f64> {
    let (s, d) = (q.shape()[0], q.shape()[1]);
    let mut out = vec![0.0; s * d];
    for i in 0..s {
        let logits: Vec<Option<f64>> = (0..s)
            .map(|j| {
                mask.get(i, j).then(|| {
                    (0..d).map(|c| q.data()[i * d + c] * k.data()[j * d + c]).sum::<f64>() / (d as f64).sqrt()
                })
            })
            .collect();
        let m = logits.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().flatten().map(|l| (l - m).exp()).sum();
        for (j, l) in logits.iter().enumerate() {
            if let Some(l) = l {
                let w = (l - m).exp() / z;
                for c in 0..d {
                    out[i * d + c] += w * v.data()[j * d + c];
                }
            }
        }
    }
    out
}

#[test]
fn single_token_returns_value() {
    let q = Tensor::<f32>::new(vec![1, 2], vec![0.3, -1.0]).unwrap();
    let v = Tensor::<f32>::new(vec![1, 2], vec![4.0, 5.0]).unwrap();
    let out = masked_attention_reference(&q, &q, &v, &MaskMatrix::all_true(1)).unwrap();
    assert_eq!(out.data(), v.data());
}

#[test]
fn diagonal_mask_returns_own_value() {
    let mut rng = RngStream::new(1);
    let q = rand_tensor(&mut rng, 5, 3);
    let k = rand_tensor(&mut rng, 5, 3);
    let v = rand_tensor(&mut rng, 5, 3);
    let out = masked_attention_reference(&q, &k, &v, &MaskMatrix::from_fn(5, |i, j| i == j)).unwrap();
    assert_eq!(out.data(), v.data());
}

#[test]
fn reference_matches_loop_oracle() {
    let spec = TopologySpec::new(2, 2, 1, 2, 1, 1, None).unwrap();
    let mut rng = RngStream::new(2);
    let s = spec.seq_len();
    let q = Tensor::<f64>::from_fn(&[s, 4], |_| rng.normal());
    let k = Tensor::<f64>::from_fn(&[s, 4], |_| rng.normal());
    let v = Tensor::<f64>::from_fn(&[s, 4], |_| rng.normal());
    let mask = causal_hub_mask(&spec).unwrap();
    let out = masked_attention_reference(&q, &k, &v, &mask).unwrap();
    for (a, b) in out.data().iter().zip(per_query_loop(&q, &k, &v, &mask)) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn sparse_matches_dense_seeded() {
    let spec = TopologySpec::new(4, 2, 2, 2, 2, 1, None).unwrap();
    let mut rng = RngStream::new(3);
    let s = spec.seq_len();
    let (q, k, v) = (rand_tensor(&mut rng, s, 8), rand_tensor(&mut rng, s, 8), rand_tensor(&mut rng, s, 8));
    let dense = masked_attention_reference(&q, &k, &v, &causal_hub_mask(&spec).unwrap()).unwrap();
    let sparse = sparse_hub_attention(&q, &k, &v, &spec).unwrap();
    assert!(dense.max_abs_diff(&sparse).unwrap() < 1e-5);
}

#[test]
fn no_hubs_means_independent_streams() {
    let spec = TopologySpec::new(3, 2, 1, 2, 0, 2, None).unwrap();
    let mut rng = RngStream::new(4);
    let s = spec.seq_len();
    let (q, k, v) = (rand_tensor(&mut rng, s, 4), rand_tensor(&mut rng, s, 4), rand_tensor(&mut rng, s, 4));
    let sparse = sparse_hub_attention(&q, &k, &v, &spec).unwrap();
    let single = TopologySpec::new(1, 2, 1, 2, 0, 2, None).unwrap();
    for p in 0..3 {
        let r = spec.agent_range(p, 0, 2);
        let cut = |t: &Tensor<f32>| Tensor::new(vec![4, 4], t.data()[r.start * 4..r.end * 4].to_vec()).unwrap();
        let alone = sparse_hub_attention(&cut(&q), &cut(&k), &cut(&v), &single).unwrap();
        assert_eq!(alone.data(), &sparse.data()[r.start * 4..r.end * 4]);
    }
}

#[test]
fn single_agent_equals_dense_over_stream_and_hubs() {
    let spec = TopologySpec::new(1, 3, 1, 2, 2, 3, None).unwrap();
    let mut rng = RngStream::new(5);
    let s = spec.seq_len();
    let (q, k, v) = (rand_tensor(&mut rng, s, 4), rand_tensor(&mut rng, s, 4), rand_tensor(&mut rng, s, 4));
    let dense = masked_attention_reference(&q, &k, &v, &MaskMatrix::all_true(s)).unwrap();
    let sparse = sparse_hub_attention(&q, &k, &v, &spec).unwrap();
    assert!(dense.max_abs_diff(&sparse).unwrap() < 1e-5);
}

#[test]
fn dense_topology_plan_matches_block_causal_reference() {
    let spec = TopologySpec::new(3, 4, 1, 2, 0, 2, None).unwrap();
    let vis = Visibility {
        topology: StreamTopology::Dense,
        causal: true,
        window_blocks: None,
    };
    let plan = AttentionPlan::full_sequence(&spec, vis).unwrap();
    let mut rng = RngStream::new(6);
    let s = spec.seq_len();
    let (q, k, v) = (rand_tensor(&mut rng, s, 4), rand_tensor(&mut rng, s, 4), rand_tensor(&mut rng, s, 4));
    let mut stats = AttentionStats::default();
    let out = attend(&plan, q.data(), k.data(), v.data(), 1, 4, &mut stats, true);
    let mask = crate::topology::visibility_mask(&spec, &vis).unwrap();
    let dense = masked_attention_reference(&q, &k, &v, &mask).unwrap();
    assert!(dense.max_abs_diff(&Tensor::new(vec![s, 4], out).unwrap()).unwrap() < 1e-5);
    assert_eq!(stats.pairs, mask.count() as u64);
}

#[test]
fn pair_counter_matches_closed_form() {
    let spec = TopologySpec::new(3, 3, 2, 2, 2, 3, None).unwrap();
    let plan = AttentionPlan::full_sequence(&spec, Visibility::causal_hub(&spec)).unwrap();
    let s = spec.seq_len();
    let z = vec![0.0f32; s * 2];
    let mut stats = AttentionStats::default();
    attend(&plan, &z, &z, &z, 1, 2, &mut stats, false);
    assert_eq!(stats.pairs, attention_cost(&spec, CostMode::SparseHub, 1, 2).pairs);
    assert_eq!(stats.cross_agent_reads, 0);
}

#[test]
fn backward_matches_finite_differences() {
    let spec = TopologySpec::new(2, 2, 1, 2, 1, 1, None).unwrap();
    let plan = AttentionPlan::full_sequence(&spec, Visibility::causal_hub(&spec)).unwrap();
    let mut rng = RngStream::new(7);
    let s = spec.seq_len();
    let (heads, hd) = (2, 2);
    let n = s * heads * hd;
    let q: Vec<f64> = rng.normal_vec(n, 1.0);
    let k: Vec<f64> = rng.normal_vec(n, 1.0);
    let v: Vec<f64> = rng.normal_vec(n, 1.0);
    let w: Vec<f64> = rng.normal_vec(n, 1.0);
    let loss = |q: &[f64], k: &[f64], v: &[f64]| {
        let mut st = AttentionStats::default();
        crate::numerics::dot(&attend(&plan, q, k, v, heads, hd, &mut st, false), &w)
    };
    let (dq, dk, dv) = attend_backward(&plan, &q, &k, &v, &w, heads, hd);
    let h = 1e-6;
    for (which, grad) in [(0, &dq), (1, &dk), (2, &dv)] {
        for i in 0..n {
            let mut bufs = [q.clone(), k.clone(), v.clone()];
            bufs[which][i] += h;
            let up = loss(&bufs[0], &bufs[1], &bufs[2]);
            bufs[which][i] -= 2.0 * h;
            let down = loss(&bufs[0], &bufs[1], &bufs[2]);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "{which} {i}: {fd} vs {}", grad[i]);
        }
    }
}

fn mha_setup(alpha: f64, agents: usize, hubs: usize) -> (TopologySpec, AttentionWeights<f32>, RotaryEncoder) {
    let spec = TopologySpec::new(agents, 2, 2, 2, hubs, 1, None).unwrap();
    let layout = RopeLayout::new(4, 4, 2, 2).unwrap();
    let pool = SimplexPool::new(3, 2, alpha).unwrap();
    let assign = VertexAssignment::identity(agents, 3).unwrap();
    let enc = RotaryEncoder::new(&layout, &pool, &assign, (2, 2, 2)).unwrap();
    let mut rng = RngStream::new(9);
    (spec, AttentionWeights::init(2, 12, &mut rng), enc)
}

#[test]
fn mha_zero_weights_zero_output() {
    let (spec, _, enc) = mha_setup(1.0, 2, 1);
    let w = AttentionWeights::<f32>::zeros(2, 12);
    let mut rng = RngStream::new(1);
    let x = Tensor::from_fn(&[spec.seq_len(), 24], |_| rng.normal());
    let out = multi_head_attention(&x, &w, &spec, &enc).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn mha_identical_agents_identical_outputs_without_phase() {
    let (spec, mut w, _) = mha_setup(0.0, 2, 0);
    w.heads = 1;
    w.head_dim = 24;
    let layout = RopeLayout::new(12, 4, 4, 4).unwrap();
    let pool = SimplexPool::new(3, 2, 0.0).unwrap();
    let enc = RotaryEncoder::new(&layout, &pool, &VertexAssignment::identity(2, 3).unwrap(), (2, 2, 2)).unwrap();
    let mut rng = RngStream::new(2);
    let per_agent: Vec<f32> = rng.normal_vec(8 * 24, 1.0);
    let mut data = per_agent.clone();
    data.extend_from_slice(&per_agent);
    let x = Tensor::new(vec![16, 24], data).unwrap();
    let out = multi_head_attention(&x, &w, &spec, &enc).unwrap();
    assert_eq!(&out.data()[..8 * 24], &out.data()[8 * 24..]);
}

#[test]
fn mha_sparse_matches_dense_pathway() {
    let (spec, w, enc) = mha_setup(1.0, 2, 2);
    let mut rng = RngStream::new(3);
    let x = Tensor::from_fn(&[spec.seq_len(), 24], |_| rng.normal());
    let a = multi_head_attention(&x, &w, &spec, &enc).unwrap();
    let b = multi_head_attention_dense(&x, &w, &spec, &enc).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
}

#[test]
fn layout_mismatch_rejected() {
    let spec = TopologySpec::new(2, 2, 1, 1, 1, 1, None).unwrap();
    let t = Tensor::<f32>::zeros(&[5, 2]);
    assert!(sparse_hub_attention(&t, &t, &t, &spec).is_err());
}
