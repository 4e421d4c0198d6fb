use ndarray::{Array4, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::nn::BackboneSpec;

fn tiny_arch() -> SslArchitecture {
    SslArchitecture {
        backbone: BackboneSpec::Mlp { in_features: 8, widths: vec![16] },
        mlp_hidden: 16,
        projection_size: 8,
    }
}

fn random_batch(seed: u64, n: usize) -> ViewBatch<f64> {
    let mut rng = crate::seed::rng(seed, &[99]);
    let v1 = Array4::from_shape_simple_fn((n, 8, 1, 1), || rng.random_range(-1.0..1.0));
    let v2 = Array4::from_shape_simple_fn((n, 8, 1, 1), || rng.random_range(-1.0..1.0));
    ViewBatch::new(v1, v2).unwrap()
}

#[test]
fn identical_branches_and_views_give_equal_projections() {
    let (mut online, mut target) = init_branches::<f32>(&tiny_arch(), BackboneInit::Random, 4).unwrap();
    let b = random_batch(1, 5);
    let v = b.v1.mapv(|x| x as f32);
    let batch = ViewBatch::new(v.clone(), v).unwrap();
    let out = forward_views(&mut online, &mut target, &batch, LossVariant::Paper, Mode::Train).unwrap();
    for (a, b) in out.y2.iter().zip(out.y2_target.iter()) {
        assert!((a - b).abs() <= 1e-5);
    }
}

#[test]
fn default_projection_size_gives_batch_by_256_outputs() {
    let arch = SslArchitecture {
        backbone: BackboneSpec::Conv { in_channels: 1, widths: vec![4, 8] },
        mlp_hidden: 4096,
        projection_size: 256,
    };
    let (mut online, mut target) = init_branches::<f32>(&arch, BackboneInit::Random, 0).unwrap();
    let v = Array4::from_shape_fn((3, 1, 16, 16), |(n, _, i, j)| ((n + i + 2 * j) % 7) as f32 / 7.0);
    let batch = ViewBatch::new(v.clone(), v.mapv(|x| 1.0 - x)).unwrap();
    let out = forward_views(&mut online, &mut target, &batch, LossVariant::Paper, Mode::Train).unwrap();
    assert_eq!(out.p1.dim(), (3, 256));
    assert_eq!(out.p2.dim(), (3, 256));
    assert_eq!(out.y2_target.dim(), (3, 256));
}

#[test]
fn target_never_accumulates_gradient() {
    let (mut online, mut target) = init_branches::<f64>(&tiny_arch(), BackboneInit::Random, 2).unwrap();
    let batch = random_batch(2, 4);
    let before = target.parameter_set("");
    accumulate_gradients(&mut online, &mut target, &batch, LossVariant::Paper, Mode::Train).unwrap();
    let grads = online.gradient_set("");
    assert!(grads.iter().any(|(_, g)| g.iter().any(|v| *v != 0.0)));
    target.visit("", &mut |name, p| {
        assert!(p.grad.iter().all(|g| *g == 0.0), "target grad for {name}");
    });
    // online gradients are keyed by online names only
    assert!(grads.names().all(|n| !n.starts_with("target")));
    assert_eq!(target.parameter_set(""), before);
}

#[test]
fn online_gradient_matches_finite_differences_with_target_held_constant() {
    for variant in [LossVariant::Paper, LossVariant::ByolSymmetric] {
        let (mut online, mut target) = init_branches::<f64>(&tiny_arch(), BackboneInit::Random, 11).unwrap();
        // give the target its own weights so the two branches differ
        let mut rng = crate::seed::rng(5, &[]);
        let mut t = target.parameter_set("");
        let names: Vec<String> = t.names().map(String::from).collect();
        for n in names {
            if n.contains("running") {
                continue;
            }
            let v = t.get(&n).unwrap().mapv(|x| x + rng.random_range(-0.1..0.1));
            t.insert(n, v);
        }
        target.load_parameter_set("", &t).unwrap();
        let batch = random_batch(3, 6);
        accumulate_gradients(&mut online, &mut target, &batch, variant, Mode::BatchStats).unwrap();
        let analytic = online.gradient_set("");
        let values = online.parameter_set("");
        let loss_at = |set: &ParameterSet<f64>| {
            let mut o = online.clone();
            let mut t = target.clone();
            o.load_parameter_set("", set).unwrap();
            let f = forward_views(&mut o, &mut t, &batch, variant, Mode::BatchStats).unwrap();
            loss_with_gradients(variant, &f.p1, &f.p2, f.y1_target.as_ref(), &f.y2_target)
                .unwrap()
                .value
                .total
        };
        let h = 1e-6;
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for (name, g) in analytic.iter() {
            for i in 0..g.len() {
                let mut plus = values.clone();
                let mut v = plus.get(name).unwrap().clone();
                v.as_slice_mut().unwrap()[i] += h;
                plus.insert(name.clone(), v.clone());
                let mut minus = values.clone();
                v.as_slice_mut().unwrap()[i] -= 2.0 * h;
                minus.insert(name.clone(), v);
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let a = g.as_slice().unwrap()[i];
                diff += (fd - a).powi(2);
                norm += a.powi(2).max(fd.powi(2));
            }
        }
        let rel = diff.sqrt() / norm.sqrt();
        assert!(rel < 1e-4, "{variant:?}: relative error {rel}");
    }
}

fn scalar_set(v: f64) -> ParameterSet<f64> {
    let mut s = ParameterSet::new();
    s.insert("w", ArrayD::from_elem(IxDyn(&[1]), v));
    s
}

#[test]
fn ema_examples() {
    let out = ema_update(&scalar_set(1.0), &scalar_set(0.0), 0.996).unwrap();
    assert_eq!(out.get("w").unwrap()[[0]], 0.996);
    let mut t = ParameterSet::new();
    t.insert("w", ArrayD::from_shape_vec(IxDyn(&[2]), vec![2.0, 4.0]).unwrap());
    let mut o = ParameterSet::new();
    o.insert("w", ArrayD::zeros(IxDyn(&[2])));
    let out = ema_update(&t, &o, 0.5).unwrap();
    assert_eq!(out.get("w").unwrap().as_slice().unwrap(), &[1.0, 2.0]);
}

#[test]
fn ema_converges_geometrically_to_constant_online_value() {
    // closed form: theta_k = c + tau^k (theta_0 - c)
    let (tau, c, theta0) = (0.9, 3.0, -1.0);
    let online = scalar_set(c);
    let mut t = scalar_set(theta0);
    for k in 1..=50 {
        t = ema_update(&t, &online, tau).unwrap();
        let expected = c + tau.powi(k) * (theta0 - c);
        assert!((t.get("w").unwrap()[[0]] - expected).abs() < 1e-12);
    }
}

#[test]
fn ema_rejects_bad_inputs() {
    assert!(ema_update(&scalar_set(1.0), &scalar_set(0.0), 1.5).is_err());
    assert!(ema_update(&scalar_set(1.0), &scalar_set(0.0), -0.1).is_err());
    let mut other = ParameterSet::new();
    other.insert("v", ArrayD::from_elem(IxDyn(&[1]), 0.0));
    assert!(matches!(ema_update(&scalar_set(1.0), &other, 0.5), Err(Error::MissingBlob(_))));
    let mut wide = ParameterSet::new();
    wide.insert("w", ArrayD::from_elem(IxDyn(&[2]), 0.0));
    assert!(matches!(ema_update(&scalar_set(1.0), &wide, 0.5), Err(Error::ShapeMismatch { .. })));
}

fn step_with_tau(tau: f64) -> (ParameterSet<f32>, ParameterSet<f32>, OnlineBranch<f32>) {
    let (mut online, mut target) = init_branches::<f32>(&tiny_arch(), BackboneInit::Random, 8).unwrap();
    let b = random_batch(4, 6);
    let batch = ViewBatch::new(b.v1.mapv(|x| x as f32), b.v2.mapv(|x| x as f32)).unwrap();
    let before = target.parameter_set("");
    let mut opt = Sgd::new(0.03, 0.9, 4e-4);
    let settings = SslSettings { tau, variant: LossVariant::Paper };
    ssl_step(&mut online, &mut target, &batch, &mut opt, &settings).unwrap();
    (before, target.parameter_set(""), online)
}

#[test]
fn tau_one_freezes_target() {
    let (before, after, _) = step_with_tau(1.0);
    assert_eq!(before, after);
}

#[test]
fn tau_zero_copies_updated_online_encoder() {
    let (before, after, online) = step_with_tau(0.0);
    assert_eq!(after, online.encoder.parameter_set(""));
    assert_ne!(before, after);
}

#[test]
fn ssl_step_is_deterministic() {
    let (_, a, oa) = step_with_tau(0.996);
    let (_, b, ob) = step_with_tau(0.996);
    assert_eq!(a, b);
    assert_eq!(oa.parameter_set(""), ob.parameter_set(""));
}

#[test]
fn ssl_step_aborts_on_non_finite_input() {
    let (mut online, mut target) = init_branches::<f32>(&tiny_arch(), BackboneInit::Random, 8).unwrap();
    let mut v = Array4::<f32>::ones((4, 8, 1, 1));
    v[[1, 3, 0, 0]] = f32::NAN;
    let batch = ViewBatch::new(v.clone(), v).unwrap();
    let online_before = online.parameter_set("");
    let mut opt = Sgd::new(0.03, 0.9, 4e-4);
    let settings = SslSettings { tau: 0.996, variant: LossVariant::Paper };
    let err = ssl_step(&mut online, &mut target, &batch, &mut opt, &settings).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_) | Error::Degenerate(_)), "{err}");
    assert_eq!(online.parameter_set(""), online_before);
}

#[test]
fn init_copies_online_encoder_into_target() {
    let (online, target) = init_branches::<f32>(&tiny_arch(), BackboneInit::Random, 3).unwrap();
    assert_eq!(online.encoder.parameter_set(""), target.parameter_set(""));
    let (again, _) = init_branches::<f32>(&tiny_arch(), BackboneInit::Random, 3).unwrap();
    assert_eq!(online.parameter_set(""), again.parameter_set(""));
}

#[test]
fn init_loads_pretrained_backbone_and_reports_missing_blob() {
    let (donor, _) = init_branches::<f32>(&tiny_arch(), BackboneInit::Random, 100).unwrap();
    let weights = donor.encoder.backbone.parameter_set("backbone");
    let (online, target) = init_branches::<f32>(&tiny_arch(), BackboneInit::Pretrained(&weights), 1).unwrap();
    assert_eq!(online.encoder.backbone.parameter_set("backbone"), weights);
    assert_eq!(target.encoder().backbone.parameter_set("backbone"), weights);

    let mut partial = weights.clone();
    partial.remove("backbone.layer0.bias");
    match init_branches::<f32>(&tiny_arch(), BackboneInit::Pretrained(&partial), 1) {
        Err(Error::MissingBlob(name)) => assert_eq!(name, "backbone.layer0.bias"),
        other => panic!("expected missing blob, got {:?}", other.err()),
    }
}

proptest! {
    #[test]
    fn ema_output_lies_between_inputs(
        t in prop::collection::vec(-1e3f64..1e3, 1..20),
        o in prop::collection::vec(-1e3f64..1e3, 20),
        tau in 0.0f64..=1.0,
    ) {
        let n = t.len();
        let mut ts = ParameterSet::new();
        ts.insert("a", ArrayD::from_shape_vec(IxDyn(&[n]), t.clone()).unwrap());
        let mut os = ParameterSet::new();
        os.insert("a", ArrayD::from_shape_vec(IxDyn(&[n]), o[..n].to_vec()).unwrap());
        let out = ema_update(&ts, &os, tau).unwrap();
        for (i, v) in out.get("a").unwrap().iter().enumerate() {
            prop_assert!(*v >= t[i].min(o[i]) && *v <= t[i].max(o[i]));
        }
    }
}
