use proptest::prelude::*;

use super::*;
use crate::brdf::CHROMA_DELTA;
use crate::autodiff::{finite_diff_check, GradCheckOptions, ParamStore};
use crate::scene::{generate_scene, SceneSpec};

fn value(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).item()
}

fn rows(data: &[[f64; 3]]) -> Tensor<f64> {
    Tensor::from_rows(data).unwrap()
}

#[test]
fn reconstruction_examples() {
    let gt = rows(&[[0.2, 0.5, 0.1], [0.7, 0.3, 0.9], [0.05, 0.05, 0.6]]);
    let mut g = Graph::new();
    let t = g.constant(gt.clone());
    let same = g.constant(gt.clone());
    let l = squared_error(&mut g, same, t).unwrap();
    assert_eq!(value(&g, l), 0.0);

    let half = g.constant(gt.map(|x| 0.5 * x));
    let rec_d = squared_error(&mut g, half, t).unwrap();
    let chr_half = chroma(&mut g, half).unwrap();
    let chr_gt = g.constant(chroma_rows(&gt));
    let l_chr = squared_error(&mut g, chr_half, chr_gt).unwrap();
    assert!(value(&g, rec_d) > 0.0);
    assert!(value(&g, l_chr) < 1e-12, "{}", value(&g, l_chr));

    let off = g.constant(gt.map(|x| x + 0.1));
    let rec_c = squared_error(&mut g, off, t).unwrap();
    assert!((value(&g, rec_c) - 0.03).abs() < 1e-12);

    let empty = g.constant(Tensor::zeros(0, 3));
    assert!(squared_error(&mut g, empty, empty).is_err());
}

#[test]
fn graph_chroma_matches_chromaticity() {
    let c = rows(&[[0.3, 0.2, 0.1], [0.0, 0.0, 0.0], [2.0, 0.5, 7.0]]);
    let mut g = Graph::new();
    let v = g.constant(c.clone());
    let ch = chroma(&mut g, v).unwrap();
    let want = chroma_rows(&c);
    for (a, b) in g.value(ch).data().iter().zip(want.data()) {
        assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
    }
}

#[test]
fn lambertian_examples() {
    let cases = [(0.75, 0.2, 0.1), (0.4, 0.9, 0.0), (1.0, 1.0, 1.0)];
    for (kr, ks, want) in cases {
        let mut g = Graph::new();
        let s = g.constant(rows(&[[ks; 3]]));
        let r = g.constant(Tensor::scalar(kr));
        let l = lambertian(&mut g, s, r).unwrap();
        assert!((value(&g, l) - want).abs() < 1e-12, "k_r {kr}");
    }
}

#[test]
fn smooth_examples() {
    let a = [0.6, 0.8, 0.0];
    let b = [0.8, 0.6, 0.0];
    let same_chr = [1.0 / 3.0; 3];
    assert_eq!(smooth_weight(&same_chr, &same_chr, 60.0, 0.1), 1.0);
    // Squared chromaticity gap 0.04 stays under the threshold.
    let c1 = [0.5, 0.3, 0.2];
    let c2 = [0.5, 0.1, 0.4];
    assert_eq!(smooth_weight(&c1, &c2, 60.0, 0.1), 1.0);
    let c3 = [0.4, 0.0, 0.0];
    let c4 = [0.0, 0.0, 0.0];
    let w = smooth_weight(&c3, &c4, 60.0, 0.1);
    assert!((w - (-9.6f64).exp()).abs() < 1e-15 && (w - 6.8e-5).abs() < 1e-6);

    let mut g = Graph::new();
    let zi = g.constant(rows(&[a, a]));
    let zj = g.constant(rows(&[b, a]));
    let l = smooth(&mut g, zi, zj, &[1.0, 1.0]).unwrap();
    let want = 0.5 * (1.0 - 0.96);
    assert!((value(&g, l) - want).abs() < 1e-12);
}

#[test]
fn total_loss_weights() {
    let w = TrainConfig::default().weights();
    assert_eq!(LossTerms::default().total(&w), 0.0);
    let only = |f: fn(&mut LossTerms)| {
        let mut t = LossTerms::default();
        f(&mut t);
        t.total(&w)
    };
    assert_eq!(only(|t| t.rec_c = 1.0), 0.2);
    assert_eq!(only(|t| t.sm = 1.0), 0.05);
    assert_eq!(only(|t| t.lam = 1.0), 0.001);
    assert_eq!(only(|t| t.vq = 1.0), 1.0);

    let mut g = Graph::<f64>::new();
    let one = g.constant(Tensor::scalar(1.0));
    let t = weighted_sum(&mut g, &[(0.2, Some(one)), (1.0, None), (0.05, Some(one))]).unwrap();
    assert!((value(&g, t) - 0.25).abs() < 1e-15);
}

#[test]
fn stop_gradient_discipline() {
    let mut store = ParamStore::<f64>::new();
    let ks = store.add("ks", rows(&[[0.2, 0.3, 0.1], [0.5, 0.5, 0.5]]));
    let kr = store.add("kr", Tensor::from_f64(2, 1, &[0.8, 0.3]).unwrap());
    let mut g = Graph::new();
    let (vs, vr) = (g.param(&store, ks), g.param(&store, kr));
    let l = lambertian(&mut g, vs, vr).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.param(kr).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
    let gs = grads.param(ks).unwrap();
    assert!((gs.get(0, 0) - 0.6 / 6.0).abs() < 1e-15 && gs.get(1, 0) == 0.0);

    let mut store = ParamStore::<f64>::new();
    let z = store.add("z", rows(&[[0.6, 0.8, 0.0]]));
    let e = store.add("e", rows(&[[1.0, 0.0, 0.0]]));
    let mut g = Graph::new();
    let (vz, ve) = (g.param(&store, z), g.param(&store, e));
    let vq = vq_loss(&mut g, vz, ve).unwrap();
    let commit = g.scale(vq.commitment, 0.1).unwrap();
    let grads = g.backward(commit).unwrap();
    assert!(grads.param(e).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
    assert!(grads.param(z).unwrap().data().iter().any(|&x| x != 0.0));
}

proptest! {
    #[test]
    fn chroma_loss_is_scale_invariant(
        c in prop::collection::vec(prop::array::uniform3(0.05f64..2.0), 1..8),
        d in prop::collection::vec(prop::array::uniform3(0.05f64..2.0), 8),
        s in 0.1f64..10.0,
    ) {
        let d = &d[..c.len()];
        let loss = |scale: f64| {
            let mut g = Graph::new();
            let pred = g.constant(rows(&c.iter().map(|r| r.map(|x| x * scale)).collect::<Vec<_>>()));
            let gt = rows(&d.iter().map(|r| r.map(|x| x * scale)).collect::<Vec<_>>());
            let cp = chroma(&mut g, pred).unwrap();
            let cg = g.constant(chroma_rows(&gt));
            let l = squared_error(&mut g, cp, cg).unwrap();
            value(&g, l)
        };
        // The delta floor moves each chromaticity by at most delta / (R+G+B).
        let min_sum = 0.15 * s.min(1.0);
        prop_assert!((loss(1.0) - loss(s)).abs() < 8.0 * CHROMA_DELTA / min_sum);
    }

    #[test]
    fn loss_terms_are_nonnegative(
        a in prop::collection::vec(prop::array::uniform3(0.0f64..3.0), 4),
        b in prop::collection::vec(prop::array::uniform3(0.0f64..3.0), 4),
        kr in prop::collection::vec(0.0f64..1.0, 4),
        w in prop::collection::vec(0.0f64..1.0, 4),
    ) {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(rows(&a)), g.constant(rows(&b)));
        let rec = squared_error(&mut g, va, vb).unwrap();
        let (ca, cb) = (chroma(&mut g, va).unwrap(), chroma(&mut g, vb).unwrap());
        let chr = squared_error(&mut g, ca, cb).unwrap();
        let kr = g.constant(Tensor::new(4, 1, kr).unwrap());
        let lam = lambertian(&mut g, vb, kr).unwrap();
        let na = g.normalize_rows(va).unwrap();
        let nb = g.normalize_rows(vb).unwrap();
        let sm = smooth(&mut g, na, nb, &w).unwrap();
        let vq = vq_loss(&mut g, na, nb).unwrap();
        for v in [rec, chr, lam, sm, vq.codebook, vq.commitment] {
            prop_assert!(value(&g, v) >= 0.0);
        }
    }
}

fn small_bundle() -> SceneBundle {
    let mut spec = SceneSpec::duo();
    spec.cameras.views = 2;
    spec.cameras.width = 16;
    spec.cameras.image_height = 16;
    spec.env_rows = 4;
    spec.env_cols = 8;
    generate_scene(&spec).unwrap()
}

#[test]
fn batches_pair_adjacent_foreground_pixels() {
    let bundle = small_bundle();
    let norm = CoordNorm::from_bundle(&bundle).unwrap();
    let pool = PixelPool::new(&bundle, norm, 60.0, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let picks = pool.sample_picks(300, &mut rng);
    let b = pool.batch::<f32>(&picks).unwrap();
    assert_eq!(b.points.len(), 300);
    assert!(!b.pair_anchor.is_empty());
    let mut k = 0;
    for (r, p) in picks.iter().enumerate() {
        let gb = &bundle.views[p.view].gbuffer;
        assert!(gb.mask[p.pixel]);
        let j = match p.neighbor {
            Some(true) => p.pixel + 1,
            _ => p.pixel + gb.width,
        };
        if k < b.pair_anchor.len() && b.pair_anchor[k] == r {
            assert!(gb.mask[j]);
            assert_eq!(b.pair_points[k], norm.apply::<f32>(&gb.points[j]));
            k += 1;
        }
    }
    assert_eq!(k, b.pair_anchor.len());
    let bad = Pick {
        view: 0,
        pixel: 0,
        neighbor: None,
    };
    assert!(pool.batch::<f32>(&[bad]).is_err());
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let bundle = small_bundle();
    let cfg = TrainConfig {
        batch: 16,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(&bundle, cfg.clone()).unwrap();
    let model = trainer.model.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let picks = trainer.pool.sample_picks(16, &mut rng);
    let batch = trainer.pool.batch::<f64>(&picks).unwrap();
    assert!(!batch.pair_anchor.is_empty());
    let keep = model.codebook.sample_dropout(&mut rng);

    for phase in [Phase::Joint, Phase::Continuous, Phase::Discrete] {
        let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let mut m = model.clone();
            m.params = s.clone();
            build_step(g, &m, &batch, Some(&keep), &cfg, phase).map(|sg| sg.total).map_err(|e| match e {
                Error::Autodiff(a) => a,
                other => panic!("{other}"),
            })
        };
        // 32 weights spread over every tensor the phase trains; latents are
        // constants in the discrete phase.
        let encoder = model.field.encoder_params();
        let ids: Vec<ParamId> =
            model.params.ids().filter(|id| phase != Phase::Discrete || !encoder.contains(id)).collect();
        let mut checked = 0;
        for k in 0..32 {
            let id = ids[k * 7 % ids.len()];
            let n = model.params.get(id).len();
            let opts = GradCheckOptions {
                step: 1e-6,
                tolerance: 1e-3,
                floor: 1e-7,
                indices: Some(vec![(k * 7919 + 13) % n]),
                ..Default::default()
            };
            let r = finite_diff_check(build, &model.params, id, &opts).unwrap();
            assert!(r.passed, "{phase:?}: {r:?}");
            checked += r.checked;
        }
        assert_eq!(checked, 32);
    }
}

#[test]
fn training_is_deterministic_and_logs_every_term() {
    let bundle = small_bundle();
    let cfg = TrainConfig {
        steps: 4,
        batch: 32,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut log = Vec::new();
        let m = train(&bundle, cfg.clone(), |r| {
            log.push(r.clone());
            Ok(())
        })
        .unwrap();
        (m.hash(), log)
    };
    let (h1, l1) = run();
    let (h2, l2) = run();
    assert_eq!(h1, h2);
    assert_eq!(l1, l2);
    assert_eq!(l1.len(), 4);
    let json = serde_json::to_value(&l1[0]).unwrap();
    for key in ["step", "L_rec_c", "L_rec_d", "L_chr", "L_vq", "L_lam", "L_sm", "L_all", "codeword_usage_histogram"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(l1[0].codeword_usage_histogram.iter().sum::<usize>(), 32);
}

#[test]
fn separate_mode_freezes_the_continuous_branch() {
    let bundle = small_bundle();
    let cfg = TrainConfig {
        steps: 4,
        batch: 16,
        mode: TrainMode::Separate,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&bundle, cfg).unwrap();
    let start = t.model.clone();
    t.step().unwrap();
    let r = t.step().unwrap();
    assert_eq!((r.rec_d, r.vq), (0.0, 0.0));
    let dec_d = t.model.field.discrete.params();
    for id in &dec_d {
        assert_eq!(t.model.params.get(*id), start.params.get(*id));
    }
    let mid = t.model.clone();
    let r = t.step().unwrap();
    assert_eq!((r.rec_c, r.lam), (0.0, 0.0));
    t.step().unwrap();
    let mut frozen = t.model.field.encoder_params();
    frozen.extend(t.model.field.continuous.params());
    frozen.push(t.model.env);
    for id in frozen {
        assert_eq!(t.model.params.get(id), mid.params.get(id));
    }
    assert!(dec_d.iter().any(|id| t.model.params.get(*id) != mid.params.get(*id)));
}

#[test]
fn config_rejects_bad_values() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { w3: -1.0, ..Default::default() },
        TrainConfig { eps: 0.0, ..Default::default() },
        TrainConfig { m0: 0, ..Default::default() },
        TrainConfig { lr_min: 1.0, ..Default::default() },
        TrainConfig { batch: 0, ..Default::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    assert!("joint".parse::<TrainMode>().is_ok() && "both".parse::<TrainMode>().is_err());
    let c = TrainConfig::default();
    assert!((c.learning_rate(0, 100) - 1e-3).abs() < 1e-15);
    assert!((c.learning_rate(99, 100) - 1e-4).abs() < 1e-15);
}

