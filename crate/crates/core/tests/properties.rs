use icrl_core::baselines::tabular::{tabular_q_train, QTrainConfig};
use icrl_core::attrib::{integrated_gradients, InterventionMode};
use icrl_core::envcore::{
    build_gridworld_graph, build_taskset, make_state_encoder, sample_tree_graph, EnvConfig, Suite, TaskSet,
};
use icrl_core::eval::query_type;
use icrl_core::model::{
    build_attention_mask, context_then_query, cross_entropy, forward, forward_with, ModelConfig, ModelParams, Role,
    RowOverride,
};
use icrl_core::probe::{cka, rep_kernel, split_envs};
use icrl_core::rng::substream;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn small_set(suite: Suite, seed: u64, len: usize) -> TaskSet {
    let cfg = EnvConfig {
        trajectory_len: len,
        ..EnvConfig::for_suite(suite)
    };
    build_taskset(10, seed, &cfg).unwrap()
}

fn params(suite: Suite, seed: u64, scale: f32) -> ModelParams<f32> {
    let mc = ModelConfig::sized(suite, 2, 2, 16);
    let mut p = ModelParams::<f32>::init(&mc, &mut substream(seed, "init", 0)).unwrap();
    p.data.iter_mut().for_each(|v| *v *= scale);
    p
}

fn suite_of(tree: bool) -> Suite {
    if tree {
        Suite::Tree
    } else {
        Suite::Gridworld
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn trajectories_follow_the_graph(seed in 0u64..1000, tree in any::<bool>()) {
        let ts = small_set(suite_of(tree), seed, 40);
        for t in &ts.tasks {
            let dec = t.encoder.decoder();
            let oracle = t.oracle();
            for k in 0..t.steps.len() {
                let tu = t.tuple(k);
                let s = dec.lookup(&tu.s).unwrap();
                let sn = dec.lookup(&tu.s_next).unwrap();
                let a = tu.a.iter().position(|&v| v == 1.0).unwrap();
                prop_assert_eq!(t.graph.step(s, a), sn);
                prop_assert_eq!(tu.r == 1.0, sn == t.goal);
            }
            for n in (0..t.graph.node_count).filter(|&n| n != t.goal) {
                for a in oracle.optimal_actions(n) {
                    prop_assert_eq!(oracle.distance_to_goal[t.graph.step(n, a)] + 1, oracle.distance_to_goal[n]);
                }
            }
        }
    }

    #[test]
    fn encoders_are_deterministic(seed in 0u64..1000, tree in any::<bool>()) {
        let ts = small_set(suite_of(tree), 3, 5);
        let g = &ts.tasks[0].graph;
        let a = make_state_encoder(&mut substream(seed, "enc", 0), g, 0.8).unwrap();
        let b = make_state_encoder(&mut substream(seed, "enc", 0), g, 0.8).unwrap();
        for n in 0..g.node_count {
            prop_assert_eq!(a.encode(n).map(f32::to_bits), b.encode(n).map(f32::to_bits));
        }
    }

    #[test]
    fn mask_matches_brute_force(roles in proptest::collection::vec(any::<bool>(), 1..60)) {
        let roles: Vec<Role> = roles.into_iter().map(|q| if q { Role::Query } else { Role::Context }).collect();
        let m = build_attention_mask(&roles);
        for i in 0..roles.len() {
            for j in 0..roles.len() {
                prop_assert_eq!(m.is_allowed(i, j), j <= i && (roles[j] == Role::Context || i == j));
            }
        }
    }

    #[test]
    fn masked_weights_are_zero_and_edits_do_not_leak(seed in 0u64..200, edit in 0usize..12) {
        let ts = small_set(Suite::Gridworld, seed, 12);
        let task = &ts.tasks[0];
        let p = params(Suite::Gridworld, seed, 6.0);
        let seq = context_then_query(task, 12, 4).unwrap();
        let mut roles = seq.roles.clone();
        roles[5] = Role::Query;
        let mask = build_attention_mask(&roles);
        let base = forward(&p, &seq.tokens, &mask, true).unwrap();
        let tr = base.trace.as_ref().unwrap();
        let len = seq.len();
        for l in 0..2 {
            for h in 0..2 {
                for i in 0..len {
                    for j in 0..len {
                        if !mask.is_allowed(i, j) {
                            prop_assert_eq!(tr.attn(l, h, i, j), 0.0);
                        }
                    }
                }
            }
        }
        // causal consistency
        let mut toks = seq.tokens.clone();
        let w = seq.width;
        toks[edit * w..(edit + 1) * w].iter_mut().for_each(|v| *v += 0.7);
        let out = forward(&p, &toks, &mask, false).unwrap();
        for i in 0..edit {
            prop_assert_eq!(out.logits_at(i, 5), base.logits_at(i, 5));
        }
        // query isolation: editing query tokens leaves context logits unchanged
        let mut toks = seq.tokens.clone();
        for q in [5, len - 1] {
            toks[q * w..(q + 1) * w].iter_mut().for_each(|v| *v -= 0.3);
        }
        let out = forward(&p, &toks, &mask, false).unwrap();
        for i in (0..len).filter(|&i| roles[i] == Role::Context) {
            prop_assert_eq!(out.logits_at(i, 5), base.logits_at(i, 5));
        }
        // capture fidelity
        let plain = forward(&p, &seq.tokens, &mask, false).unwrap();
        prop_assert_eq!(
            plain.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            base.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn loss_ignores_context_logits(seed in 0u64..1000) {
        let mut rng = substream(seed, "ce", 0);
        use rand::Rng as _;
        let len = 9;
        let mut logits: Vec<f64> = (0..len * 5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let positions = [2usize, 5, 8];
        let labels = [0usize, 3, 4];
        let mut scratch = vec![0.0; logits.len()];
        let a = cross_entropy(&logits, 5, &positions, &labels, 1.0, &mut scratch);
        for i in (0..len).filter(|i| !positions.contains(i)) {
            logits[i * 5..(i + 1) * 5].iter_mut().for_each(|v| *v = 0.0);
        }
        let b = cross_entropy(&logits, 5, &positions, &labels, 1.0, &mut scratch);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn query_type_ignores_data_after_the_prefix(seed in 0u64..500, c in 1usize..60) {
        let ts = small_set(Suite::Tree, seed, 80);
        let task = &ts.tasks[0];
        let mut steps = task.steps.clone();
        steps[c..].shuffle(&mut substream(seed, "perm", 0));
        for n in 0..task.graph.node_count {
            prop_assert_eq!(query_type(&task.steps[..c], n), query_type(&steps[..c], n));
        }
    }

    #[test]
    fn q_table_rows_follow_encodings(seed in 0u64..500, tree in any::<bool>()) {
        let ts = small_set(suite_of(tree), seed, 60);
        let task = &ts.tasks[0];
        let buf: Vec<_> = (0..task.steps.len()).map(|t| task.tuple(t)).collect();
        let cfg = QTrainConfig { epochs: 2, batch_size: 16, ..QTrainConfig::default() };
        let q = tabular_q_train(&buf, &cfg, &mut substream(seed, "q", 0)).unwrap();
        let mut seen = std::collections::HashMap::new();
        for tu in &buf {
            let r = q.row_of(&tu.s).unwrap();
            let key: Vec<u32> = tu.s.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(*seen.entry(key).or_insert(r), r);
        }
        let rows: std::collections::HashSet<usize> = seen.values().copied().collect();
        prop_assert_eq!(rows.len(), seen.len());
    }

    #[test]
    fn cka_bounded_and_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = substream(seed, "cka", 0);
        let n = 15;
        let x = DMatrix::from_fn(n, 6, |_, _| StandardNormal.sample(&mut rng));
        let y = DMatrix::from_fn(n, 4, |_, _| StandardNormal.sample(&mut rng));
        let (kx, ky) = (rep_kernel(&x), rep_kernel(&y));
        let v = cka(&kx, &ky).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        prop_assert!((cka(&rep_kernel(&(&x * scale)), &ky).unwrap() - v).abs() < 1e-9);
        let q = DMatrix::<f64>::from_fn(6, 6, |_, _| StandardNormal.sample(&mut rng)).qr().q();
        prop_assert!((cka(&rep_kernel(&(&x * q)), &ky).unwrap() - v).abs() < 1e-9);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pk = |k: &DMatrix<f64>| DMatrix::from_fn(n, n, |i, j| k[(perm[i], perm[j])]);
        prop_assert!((cka(&pk(&kx), &pk(&ky)).unwrap() - v).abs() < 1e-9);
    }

    #[test]
    fn env_splits_are_disjoint(seed in 0u64..1000, n in 2usize..200, frac in 0.05f64..0.5) {
        let envs: Vec<usize> = (0..n).collect();
        let (tr, te) = split_envs(&envs, frac, &mut substream(seed, "split", 0));
        prop_assert!(!te.is_empty());
        prop_assert!(tr.iter().all(|e| !te.contains(e)));
        prop_assert_eq!(tr.len() + te.len(), n);
    }
}

#[test]
fn ig_scales_with_the_output_head() {
    let ts = small_set(Suite::Tree, 5, 24);
    let task = &ts.tasks[2];
    let p: ModelParams<f64> = params(Suite::Tree, 1, 3.0).cast();
    let mut scaled = p.clone();
    for s in [p.layout.w_out, p.layout.b_out] {
        scaled.slice_mut(s).iter_mut().for_each(|v| *v *= 2.5);
    }
    let seq = context_then_query(task, 20, 1).unwrap();
    let a = integrated_gradients(&p, &seq, 20, 2, 16).unwrap();
    let b = integrated_gradients(&scaled, &seq, 20, 2, 16).unwrap();
    for (x, y) in a.per_token.iter().zip(&b.per_token) {
        assert!((2.5 * x - y).abs() <= 1e-9 * (1.0 + y.abs()), "{x} {y}");
    }
}

#[test]
fn ig_completeness_shrinks_with_steps() {
    let ts = small_set(Suite::Tree, 3, 24);
    let p: ModelParams<f64> = params(Suite::Tree, 0, 4.0).cast();
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    for (i, task) in ts.tasks.iter().take(5).enumerate() {
        let seq = context_then_query(task, 20, i).unwrap();
        coarse.push(integrated_gradients(&p, &seq, 20, i % 3, 20).unwrap().completeness_residual());
        fine.push(integrated_gradients(&p, &seq, 20, i % 3, 128).unwrap().completeness_residual());
    }
    let med = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(med(fine) <= med(coarse));
}

#[test]
fn interventions_touch_only_the_query_row() {
    let ts = small_set(Suite::Gridworld, 8, 16);
    let task = &ts.tasks[1];
    let p = params(Suite::Gridworld, 2, 6.0);
    let seq = context_then_query(task, 16, 7).unwrap();
    let mask = seq.mask();
    let q = 16;
    let base = forward(&p, &seq.tokens, &mask, true).unwrap().trace.unwrap();
    for mode in [InterventionMode::Necessity, InterventionMode::Sufficiency] {
        let chosen = [1usize, 4, 9];
        let allowed: Vec<bool> = (0..=q)
            .map(|j| match mode {
                InterventionMode::Necessity => !chosen.contains(&j),
                InterventionMode::Sufficiency => chosen.contains(&j),
            })
            .collect();
        let o = RowOverride {
            layer: 1,
            row: q,
            allowed: allowed.clone(),
        };
        let tr = forward_with(&p, &seq.tokens, &mask, &[o], true).unwrap().trace.unwrap();
        for l in 0..2 {
            for h in 0..2 {
                for i in 0..q {
                    for j in 0..=q {
                        assert_eq!(tr.attn(l, h, i, j), base.attn(l, h, i, j));
                    }
                }
            }
        }
        for h in 0..2 {
            let row: Vec<f32> = (0..=q).map(|j| tr.attn(1, h, q, j)).collect();
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            for (j, w) in row.iter().enumerate() {
                if !allowed[j] && j != q {
                    assert_eq!(*w, 0.0);
                }
            }
        }
    }
}

#[test]
fn tree_sampler_mean_node_count() {
    // direct simulation of the conditioned branching process, 400k draws
    const ORACLE_MEAN: f64 = 76.18;
    let n = 10_000;
    let mut rng = substream(0, "trees", 0);
    let total: usize = (0..n)
        .map(|_| sample_tree_graph(&mut rng, 0.9, 7, 1000).unwrap().node_count)
        .sum();
    let mean = total as f64 / n as f64;
    assert!((mean - ORACLE_MEAN).abs() < 1.0, "{mean}");
}

#[test]
fn neighbour_correlation_grows_with_sigma() {
    let g = build_gridworld_graph();
    let pairs: Vec<(usize, usize)> = (0..g.node_count)
        .flat_map(|n| (0..g.action_count).map(move |a| (n, a)))
        .map(|(n, a)| (n, g.step(n, a)))
        .filter(|(n, m)| n < m)
        .collect();
    let mut rng = substream(1, "enc-corr", 0);
    let mean_corr: Vec<f64> = [0.1, 0.5, 0.9]
        .iter()
        .map(|&sigma| {
            let mut acc = 0.0;
            for _ in 0..500 {
                let e = make_state_encoder(&mut rng, &g, sigma).unwrap();
                for &(a, b) in &pairs {
                    acc += e.encode(a).iter().zip(e.encode(b)).map(|(x, y)| (x * y) as f64).sum::<f64>();
                }
            }
            acc / (500 * pairs.len()) as f64
        })
        .collect();
    assert!(mean_corr.windows(2).all(|w| w[0] < w[1]), "{mean_corr:?}");
}
