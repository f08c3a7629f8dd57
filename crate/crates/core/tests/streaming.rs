use hubworld::model::{AttentionMode, ChunkInput, ForwardOptions, LayerKv, ToyModel, ToyModelConfig, ActionKind};
use hubworld::numerics::{RngStream, Scalar};
use hubworld::rope::Identity;
use hubworld::simplex::VertexAssignment;
use hubworld::streaming::*;
use hubworld::topology::TopologySpec;

fn fake_kv(spec: &TopologySpec, width: usize, layers: usize, tag: f32) -> Vec<LayerKv<f32>> {
    let rows = spec.agents * spec.block * spec.spatial() + spec.block * spec.hubs;
    (0..layers)
        .map(|l| LayerKv {
            keys: (0..rows * width).map(|i| tag + l as f32 * 0.5 + i as f32 * 1e-3).collect(),
            values: (0..rows * width).map(|i| -tag - i as f32 * 1e-3).collect(),
        })
        .collect()
}

#[test]
fn fresh_cache_is_empty_with_window_capacity() {
    let spec = TopologySpec::new(3, 12, 2, 3, 2, 3, Some(6)).unwrap();
    let c = init_caches::<f32>(&spec, 2, 4).unwrap();
    assert_eq!(c.cursor(), 0);
    for p in 0..3 {
        assert_eq!(c.cached_frames(Identity::Agent(p)), 0);
    }
    assert_eq!(c.cached_frames(Identity::Hub), 0);
    assert_eq!(c.agent_capacity_tokens(), Some(6 * 6));
    assert_eq!(c.hub_capacity_tokens(), Some(6 * 2));
}

#[test]
fn window_equal_to_sequence_never_evicts() {
    let spec = TopologySpec::new(2, 12, 1, 2, 1, 3, Some(12)).unwrap();
    let mut c = init_caches::<f32>(&spec, 1, 2).unwrap();
    for b in 0..4 {
        c.append_block(b, &fake_kv(&spec, 2, 1, b as f32)).unwrap();
    }
    assert_eq!(c.blocks_held(0, Identity::Agent(1)), vec![0, 1, 2, 3]);
    assert_eq!(c.blocks_held(0, Identity::Hub), vec![0, 1, 2, 3]);
}

#[test]
fn minimal_window_keeps_only_latest_block() {
    let spec = TopologySpec::new(2, 12, 1, 2, 1, 3, Some(3)).unwrap();
    let mut c = init_caches::<f32>(&spec, 1, 2).unwrap();
    for b in 0..4 {
        c.append_block(b, &fake_kv(&spec, 2, 1, b as f32)).unwrap();
        assert_eq!(c.blocks_held(0, Identity::Agent(0)), vec![b]);
        assert_eq!(c.blocks_held(0, Identity::Hub), vec![b]);
    }
}

#[test]
fn rolling_window_matches_replay() {
    let spec = TopologySpec::new(2, 24, 2, 2, 2, 3, Some(12)).unwrap();
    let width = 4;
    let mut c = init_caches::<f32>(&spec, 2, width).unwrap();
    let history: Vec<Vec<LayerKv<f32>>> = (0..8).map(|b| fake_kv(&spec, width, 2, b as f32 * 10.0)).collect();
    let per_agent = spec.block * spec.spatial();
    for b in 0..8 {
        c.append_block(b, &history[b]).unwrap();
        let expect: Vec<usize> = (b.saturating_sub(3)..=b).collect();
        for layer in 0..2 {
            for p in 0..2 {
                assert_eq!(c.blocks_held(layer, Identity::Agent(p)), expect);
                for &eb in &expect {
                    let got = c.cached_block(layer, Identity::Agent(p), eb).unwrap();
                    let src = &history[eb][layer];
                    let r = p * per_agent * width..(p + 1) * per_agent * width;
                    assert_eq!(got.keys, src.keys[r.clone()]);
                    assert_eq!(got.values, src.values[r]);
                }
            }
            assert_eq!(c.blocks_held(layer, Identity::Hub), expect);
        }
        assert!(c.tokens_per_layer() <= 2 * 12 * 4 + 12 * 2);
    }
}

#[test]
fn out_of_order_append_rejected() {
    let spec = TopologySpec::new(1, 6, 1, 1, 1, 3, None).unwrap();
    let mut c = init_caches::<f32>(&spec, 1, 2).unwrap();
    let kv = fake_kv(&spec, 2, 1, 0.0);
    assert!(matches!(
        c.append_block(1, &kv),
        Err(hubworld::Error::OutOfOrderBlock { expected: 0, got: 1 })
    ));
    c.append_block(0, &kv).unwrap();
    assert!(c.append_block(0, &kv).is_err());
}

#[test]
fn schedule_warp_values() {
    assert_eq!(warp_timestep(1000.0, 5.0), 1.0);
    assert_eq!(warp_timestep(1000.0, 2.5), 1.0);
    assert_eq!(warp_timestep(0.0, 5.0), 0.0);
    assert!((warp_timestep(250.0, 5.0) - 0.625).abs() < 1e-15);
    let s = schedule_sigmas(&DenoiseSchedule::default());
    assert_eq!(s.len(), 4);
    assert!(s.windows(2).all(|w| w[0] > w[1]));
    assert!(s.iter().all(|&x| x > 0.0 && x <= 1.0));
    assert!(DenoiseSchedule::new(vec![500, 750], 5.0).is_err());
    assert!(DenoiseSchedule::new(vec![1000, 0], 5.0).is_err());
}

fn rollout_setup<T: Scalar>(frames: usize, window: usize) -> (ToyModel<T>, Vec<T>, Vec<T>, VertexAssignment) {
    let base = ToyModel::<T>::new(ToyModelConfig::desk(), 21).unwrap();
    let topo = base.config.topology;
    let m = base
        .with_topology(TopologySpec {
            frames,
            window: Some(window),
            ..topo
        })
        .unwrap();
    let mut rng = RngStream::new(4);
    let first = rng.normal_vec(2 * 3 * 4 * 4, 1.0);
    let s = hubworld::verify::random_sample(&m, 2, &mut rng).unwrap();
    (m, first, s.actions, s.assignment)
}

#[test]
fn cached_rollout_matches_monolithic_forward() {
    let (m, first, actions, asg) = rollout_setup::<f32>(24, 24);
    let cfg = RolloutConfig {
        keep_trace: true,
        ..RolloutConfig::default()
    };
    let out = rollout(&m, &first, &actions, &asg, 24, &cfg).unwrap();
    assert_eq!(out.latents.len(), 2 * 24 * 4 * 4);
    assert!(out.latents.iter().all(|x| x.is_finite()));
    assert_eq!(out.trace.len(), 7 * 4);
    let mut worst = 0.0f32;
    for step in &out.trace {
        let reference = monolithic_step(&m, &out, step, &actions, &asg, 24, AttentionMode::CausalHub).unwrap();
        for (a, b) in step.velocity.iter().zip(&reference) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-4, "max deviation {worst}");
    assert_eq!(out.stats.cross_agent_reads, 0);
    assert!(out.peak_cache_tokens <= 2 * 24 * 4 + 24 * 2);
}

#[test]
fn cached_rollout_matches_in_f64() {
    let (m, first, actions, asg) = rollout_setup::<f64>(12, 12);
    let cfg = RolloutConfig {
        keep_trace: true,
        ..RolloutConfig::default()
    };
    let out = rollout(&m, &first, &actions, &asg, 12, &cfg).unwrap();
    for step in &out.trace {
        let reference = monolithic_step(&m, &out, step, &actions, &asg, 12, AttentionMode::CausalHub).unwrap();
        for (a, b) in step.velocity.iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-8);
        }
    }
}

#[test]
fn windowed_rollout_respects_memory_bound() {
    let (m, first, actions, asg) = rollout_setup::<f32>(24, 6);
    let out = rollout(&m, &first, &actions, &asg, 24, &RolloutConfig::default()).unwrap();
    assert!(out.peak_cache_tokens <= 2 * 6 * 4 + 6 * 2);
    assert_eq!(out.peak_cache_tokens, 2 * 6 * 4 + 6 * 2);
}

#[test]
fn new_actions_only_affect_the_future() {
    let (m, first, actions, asg) = rollout_setup::<f32>(12, 12);
    let base = rollout(&m, &first, &actions, &asg, 12, &RolloutConfig::default()).unwrap();
    let fields = ActionKind::Game.fields();
    for b in 1..4 {
        let mut pert = actions.clone();
        for t in b * 3..12 {
            pert[t * fields + 23] += 0.7;
            pert[t * fields + 11] = 1.0 - pert[t * fields + 11];
        }
        let out = rollout(&m, &first, &pert, &asg, 12, &RolloutConfig::default()).unwrap();
        let len = 4 * 4;
        for p in 0..2 {
            let before = (p * 12) * len..(p * 12 + b * 3) * len;
            assert_eq!(out.latents[before.clone()], base.latents[before]);
            let after = (p * 12 + b * 3) * len..(p * 12 + 12) * len;
            assert_ne!(out.latents[after.clone()], base.latents[after], "agent {p} block {b}");
        }
    }
}

#[test]
fn short_action_stream_rejected() {
    let (m, first, actions, asg) = rollout_setup::<f32>(12, 12);
    assert!(rollout(&m, &first, &actions[..actions.len() / 2], &asg, 12, &RolloutConfig::default()).is_err());
}

#[test]
fn hub_is_the_only_cross_agent_path() {
    let (m, first, actions, asg) = rollout_setup::<f32>(12, 12);
    let out = rollout(&m, &first, &actions, &asg, 12, &RolloutConfig::default()).unwrap();
    // Rebuild caches for blocks 0..2 and probe block 2 of agent 0.
    let spec = TopologySpec {
        agents: 2,
        frames: 12,
        ..m.config.topology
    };
    let mut caches = init_caches::<f32>(&spec, m.config.layers, m.config.model_dim).unwrap();
    let frame_len = 16;
    let fields = 25;
    for b in 0..2 {
        let lat = gather_frames(&out.context_latents, 2, 12, frame_len, b * 3, b * 3 + 3);
        let act = gather_frames(&actions, 2, 12, fields, b * 3, b * 3 + 3);
        let ctx = caches.context();
        let input = ChunkInput { latents: &lat, actions: &act, sigmas: &[0.0], first_frame: b * 3, frames: 3 };
        let o = m.forward(&input, &asg, Some(&ctx), ForwardOptions::new(AttentionMode::CausalHub)).unwrap();
        caches.append_block(b, &o.layer_kv).unwrap();
    }
    let lat = gather_frames(&out.latents, 2, 12, frame_len, 6, 9);
    let act = gather_frames(&actions, 2, 12, fields, 6, 9);
    let input = ChunkInput { latents: &lat, actions: &act, sigmas: &[0.5], first_frame: 6, frames: 3 };
    let run = |ctx: &[hubworld::model::KvContext<f32>]| {
        m.forward(&input, &asg, Some(ctx), ForwardOptions::new(AttentionMode::CausalHub)).unwrap()
    };
    let full = caches.context();
    let base = run(&full);
    assert_eq!(base.stats.cross_agent_reads, 0);
    let agent0 = 0..3 * frame_len;
    let mut no_hub = full.clone();
    no_hub.iter_mut().for_each(|c| c.hub_segments.clear());
    assert_ne!(run(&no_hub).velocity[agent0.clone()], base.velocity[agent0.clone()]);
    let mut no_q = full.clone();
    no_q.iter_mut().for_each(|c| c.agent_segments[1].clear());
    let o = run(&no_q);
    assert_eq!(o.stats.cross_agent_reads, 0);
    assert_ne!(o.velocity[agent0.clone()], base.velocity[agent0]);
}

#[test]
fn action_csv_round_trip() {
    let mut text = String::from("agent,frame");
    for i in 0..10 {
        text.push_str(&format!(",field_{i}"));
    }
    text.push('\n');
    for p in 0..2 {
        for t in 0..3 {
            let vals: Vec<String> = (0..10).map(|i| format!("{}", (p * 100 + t * 10 + i) as f64 * 0.01)).collect();
            text.push_str(&format!("{p},{t},{}\n", vals.join(",")));
        }
    }
    let a = parse_action_csv(&text, ActionKind::Robot, 2, 3).unwrap();
    assert_eq!(a.len(), 60);
    assert!((a[(3 + 2) * 10 + 4] - 1.24).abs() < 1e-12);
    assert!(parse_action_csv(&text, ActionKind::Robot, 2, 4).is_err());
    assert!(parse_action_csv(&text, ActionKind::Game, 2, 3).is_err());
}
