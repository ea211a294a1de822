use super::*;
use crate::decompose::build_segmentation;
use crate::field::FieldConfig;
use crate::model::{CoordNorm, ModelInit};
use crate::scene::{generate_scene, SceneSpec};

fn session() -> EditSession {
    let mut spec = SceneSpec::balls3();
    spec.cameras.views = 2;
    spec.cameras.width = 24;
    spec.cameras.image_height = 24;
    spec.env_rows = 4;
    spec.env_cols = 8;
    let bundle = generate_scene(&spec).unwrap();
    let init = ModelInit {
        field: FieldConfig {
            enc_width: 16,
            latent_dim: 8,
            dec_width: 8,
            ..FieldConfig::default()
        },
        m0: 4,
        ema_decay: 0.99,
        ema_smoothing: 1e-5,
        env_rows: 4,
        env_cols: 8,
        env_radiance: 0.5,
        seed: 21,
    };
    let model = Model::init(&init, CoordNorm::from_bundle(&bundle).unwrap()).unwrap();
    EditSession::new(Arc::new(model), Arc::new(bundle), 3).unwrap()
}

/// The label covering the most pixels of `view`.
fn dominant(s: &EditSession, view: usize) -> usize {
    let h = s.segmentation(view).unwrap().histogram(s.m());
    (0..h.len()).max_by_key(|&i| h[i]).unwrap()
}

fn red_metal(index: usize) -> EditRequest {
    EditRequest {
        index,
        k_d: [0.9, 0.05, 0.05],
        k_m: 0.95,
        k_r: 0.25,
        bbox: None,
    }
}

fn changed(a: &[f32], b: &[f32]) -> Vec<usize> {
    (0..a.len() / 3)
        .filter(|&i| (0..3).any(|c| (a[3 * i + c] - b[3 * i + c]).abs() > 1e-4))
        .collect()
}

fn region(s: &EditSession, view: usize, u: usize) -> Vec<usize> {
    let seg = s.segmentation(view).unwrap();
    (0..seg.labels.len()).filter(|&i| seg.labels[i] == u as u16).collect()
}

#[test]
fn selection_reads_the_segmentation() {
    let s = session();
    let seg = s.segmentation(0).unwrap();
    assert_eq!(seg, build_segmentation(s.model(), &s.view(0).unwrap().gbuffer, 3).unwrap());
    let fg = seg.labels.iter().position(|&l| l != BACKGROUND).unwrap();
    let (x, y) = (fg % seg.width, fg / seg.width);
    assert_eq!(s.select_material(0, x, y).unwrap(), seg.labels[fg] as usize);
    let bg = seg.labels.iter().position(|&l| l == BACKGROUND).unwrap();
    let e = s.select_material(0, bg % seg.width, bg / seg.width).unwrap_err();
    assert_eq!(e.code(), "no_material");
    assert_eq!(s.select_material(0, 24, 0).unwrap_err().code(), "out_of_bounds");
    assert_eq!(s.select_material(5, 0, 0).unwrap_err().code(), "unknown_view");
}

#[test]
fn edits_change_exactly_the_codeword_region() {
    let mut s = session();
    for view in 0..2 {
        let u = dominant(&s, view);
        let before = s.render(view, RenderMode::Edited).unwrap();
        assert_eq!(before, s.render(view, RenderMode::Continuous).unwrap());
        s.apply_edit(&red_metal(u)).unwrap();
        let after = s.render(view, RenderMode::Edited).unwrap();
        assert_eq!(changed(&before, &after), region(&s, view, u));
        for i in 0..before.len() / 3 {
            if s.segmentation(view).unwrap().labels[i] != u as u16 {
                assert_eq!(before[3 * i..3 * i + 3], after[3 * i..3 * i + 3]);
            }
        }
        s.reset();
        assert_eq!(s.render(view, RenderMode::Edited).unwrap(), before);
    }
}

#[test]
fn bounding_boxes_restrict_edits() {
    let mut s = session();
    let u = dominant(&s, 0);
    let before = [s.render(0, RenderMode::Edited).unwrap(), s.render(1, RenderMode::Edited).unwrap()];
    let bbox = BBox {
        view: 0,
        x0: 4,
        y0: 6,
        x1: 15,
        y1: 20,
    };
    s.apply_edit(&EditRequest {
        bbox: Some(bbox),
        ..red_metal(u)
    })
    .unwrap();
    let inside: Vec<usize> = region(&s, 0, u).into_iter().filter(|&i| bbox.contains(0, i % 24, i / 24)).collect();
    assert!(!inside.is_empty());
    assert_eq!(changed(&before[0], &s.render(0, RenderMode::Edited).unwrap()), inside);
    assert_eq!(before[1], s.render(1, RenderMode::Edited).unwrap());
    let bad = BBox { x1: 25, ..bbox };
    let e = s.apply_edit(&EditRequest {
        bbox: Some(bad),
        ..red_metal(u)
    });
    assert_eq!(e.unwrap_err().code(), "invalid_request");
}

#[test]
fn identity_edits_change_nothing() {
    let mut s = session();
    let u = dominant(&s, 0);
    let before = s.render(0, RenderMode::Edited).unwrap();
    let own = s.materials()[u].clone();
    let req = EditRequest {
        index: u,
        k_d: own.k_d,
        k_m: own.k_m,
        k_r: own.k_r,
        bbox: None,
    };
    s.apply_edit(&red_metal(u)).unwrap();
    assert!(s.materials()[u].overridden);
    s.apply_edit(&req).unwrap();
    assert!(!s.materials()[u].overridden);
    assert_eq!(s.render(0, RenderMode::Edited).unwrap(), before);
}

#[test]
fn edits_are_idempotent_and_commute() {
    let base = session();
    let (a, b) = (red_metal(0), EditRequest {
        index: 1,
        k_d: [0.2, 0.3, 0.9],
        k_m: 0.0,
        k_r: 0.8,
        bbox: None,
    });
    let mut s1 = session();
    s1.apply_edit(&a).unwrap();
    s1.apply_edit(&b).unwrap();
    let mut s2 = session();
    s2.apply_edit(&b).unwrap();
    s2.apply_edit(&a).unwrap();
    s2.apply_edit(&a).unwrap();
    for v in 0..2 {
        let r1 = s1.render(v, RenderMode::Edited).unwrap();
        assert_eq!(r1, s2.render(v, RenderMode::Edited).unwrap());
        assert_eq!(base.render(v, RenderMode::Discrete).unwrap(), s1.render(v, RenderMode::Discrete).unwrap());
    }
    assert_eq!(s1.materials(), s2.materials());
    assert!(s1.verify_frozen() && s1.model_hash() == base.model_hash());
}

#[test]
fn edit_requests_are_validated() {
    let mut s = session();
    assert_eq!(s.apply_edit(&red_metal(3)).unwrap_err().code(), "unknown_material");
    let mut bad = red_metal(0);
    bad.k_m = 1.5;
    assert_eq!(s.apply_edit(&bad).unwrap_err().code(), "invalid_request");
    bad.k_m = f64::NAN;
    assert!(s.apply_edit(&bad).is_err());
    assert!(s.materials().iter().all(|m| !m.overridden));
}

#[test]
fn relighting_is_linear_in_radiance() {
    let mut s = session();
    let before = s.render(0, RenderMode::Edited).unwrap();
    s.apply(&EditOp::Relight {
        lighting: Lighting::Original,
        intensity: 1.0,
    })
    .unwrap();
    assert_eq!(s.render(0, RenderMode::Edited).unwrap(), before);
    s.apply(&EditOp::Relight {
        lighting: Lighting::Original,
        intensity: 2.0,
    })
    .unwrap();
    let twice = s.render(0, RenderMode::Edited).unwrap();
    assert!(before.iter().zip(&twice).all(|(a, b)| 2.0 * a == *b));
    s.apply(&EditOp::Relight {
        lighting: Lighting::Preset { name: "dusk".into() },
        intensity: 1.0,
    })
    .unwrap();
    assert_ne!(s.render(0, RenderMode::Edited).unwrap(), before);
    let bad = EditOp::Relight {
        lighting: Lighting::Map {
            rows: 2,
            cols: 2,
            radiance: vec![1.0; 5],
        },
        intensity: 1.0,
    };
    assert_eq!(s.apply(&bad).unwrap_err().code(), "invalid_request");
    s.apply(&EditOp::Reset).unwrap();
    assert_eq!(s.render(0, RenderMode::Edited).unwrap(), before);
}

#[test]
fn ops_round_trip_through_json() {
    let ops = vec![
        EditOp::Edit(EditRequest {
            bbox: Some(BBox {
                view: 1,
                x0: 0,
                y0: 1,
                x1: 2,
                y1: 3,
            }),
            ..red_metal(2)
        }),
        EditOp::Relight {
            lighting: Lighting::Map {
                rows: 1,
                cols: 1,
                radiance: vec![0.1, 0.2, 0.3],
            },
            intensity: 0.5,
        },
        EditOp::Reset,
    ];
    for op in ops {
        let text = serde_json::to_string(&op).unwrap();
        assert_eq!(serde_json::from_str::<EditOp>(&text).unwrap(), op);
    }
    let op: EditOp = serde_json::from_str(r#"{"op":"relight","lighting":{"kind":"preset","name":"dusk"}}"#).unwrap();
    assert_eq!(op, EditOp::Relight {
        lighting: Lighting::Preset { name: "dusk".into() },
        intensity: 1.0
    });
}

#[test]
fn stored_cameras_render_like_their_views() {
    let s = session();
    let cam = s.view(1).unwrap().camera;
    let a = s.render_camera(&cam, 24, 24, RenderMode::Continuous).unwrap();
    assert_eq!(a, s.render(1, RenderMode::Continuous).unwrap());
}

#[test]
fn validation_never_mutates() {
    let s = session();
    let before = s.render(0, RenderMode::Edited).unwrap();
    s.validate(&EditOp::Edit(red_metal(0))).unwrap();
    assert!(s.validate(&EditOp::Edit(red_metal(7))).is_err());
    assert!(s
        .validate(&EditOp::Relight {
            lighting: Lighting::Preset { name: "noon".into() },
            intensity: 1.0
        })
        .is_err());
    assert_eq!(s.render(0, RenderMode::Edited).unwrap(), before);
    assert!(s.materials().iter().all(|m| !m.overridden));
}
