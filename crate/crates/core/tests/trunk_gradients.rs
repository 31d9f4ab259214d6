use lowshot_core::netcore::{extract_features, CgnlScale, FeatureExtractorConfig, Trunk};
use lowshot_core::rng::substream;
use lowshot_core::CorrectionModel;
use rand::Rng;

fn config(channels: Vec<usize>, cgnl: Option<usize>, scale: CgnlScale) -> FeatureExtractorConfig {
    FeatureExtractorConfig { input_size: 8, channels, embedding_dim: 5, cgnl_after_stage: cgnl, cgnl_scale: scale }
}

fn model(cfg: FeatureExtractorConfig, seed: u64) -> CorrectionModel {
    let mut m = CorrectionModel::initialize(cfg, vec!["a".into(), "b".into()], vec![0, 1], vec![], 16.0, seed).unwrap();
    // Nonzero output projection so the non-local path carries gradient.
    let rng = &mut substream(seed, "test/params");
    let layout = m.layout();
    if let Some(t) = layout.get("cgnl.z") {
        for v in &mut m.params[t.range()] {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    for t in layout.tensors.iter().filter(|t| t.name.ends_with(".bias")) {
        for v in &mut m.params[t.range()] {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    m
}

/// Objective `sum(u * emb)` and its central difference; `None` across a ReLU kink.
fn fd(eval: &mut dyn FnMut(f64) -> f64) -> Option<f64> {
    let h = 1e-5;
    let full = (eval(h) - eval(-h)) / (2.0 * h);
    let half = (eval(h / 2.0) - eval(-h / 2.0)) / h;
    ((full - half).abs() <= 1e-6 * full.abs().max(1.0)).then_some(full)
}

fn rel(a: &[f64], n: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if s == 0.0 {
        0.0
    } else {
        d / s
    }
}

#[test]
fn trunk_gradients_match_finite_differences() {
    let configs = [
        config(vec![3, 4], Some(1), CgnlScale::None),
        config(vec![2, 4], Some(2), CgnlScale::InversePositions),
        config(vec![4, 3, 2], Some(2), CgnlScale::None),
        config(vec![3, 3], None, CgnlScale::None),
    ];
    for (case, cfg) in configs.into_iter().enumerate() {
        let m = model(cfg.clone(), case as u64);
        let rng = &mut substream(case as u64, "test/input");
        let x: Vec<f64> = (0..cfg.input_len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let u: Vec<f64> = (0..cfg.embedding_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |params: &[f64], input: &[f64]| -> f64 {
            let (emb, _) = Trunk::new(&cfg, params).unwrap().forward(input);
            emb.iter().zip(&u).map(|(a, b)| a * b).sum()
        };
        let trunk = Trunk::new(&cfg, &m.params).unwrap();
        let (_, cache) = trunk.forward(&x);
        let mut grad = vec![0.0; m.params.len()];
        let dx = trunk.backward(&cache, &u, &mut grad, true).unwrap();

        let (mut a, mut n, mut skipped) = (Vec::new(), Vec::new(), 0);
        let mut params = m.params.clone();
        for i in 0..params.len() {
            let orig = params[i];
            let got = fd(&mut |d| {
                params[i] = orig + d;
                let v = objective(&params, &x);
                params[i] = orig;
                v
            });
            match got {
                Some(v) => {
                    a.push(grad[i]);
                    n.push(v);
                }
                None => skipped += 1,
            }
        }
        assert!(skipped * 10 < params.len(), "case {case}: {skipped} kinks");
        let e = rel(&a, &n);
        assert!(e < 1e-4, "case {case}: parameter gradient relative error {e:e}");

        let (mut a, mut n) = (Vec::new(), Vec::new());
        let mut input = x.clone();
        for i in 0..input.len() {
            let orig = input[i];
            if let Some(v) = fd(&mut |d| {
                input[i] = orig + d;
                let v = objective(&m.params, &input);
                input[i] = orig;
                v
            }) {
                a.push(dx[i]);
                n.push(v);
            }
        }
        let e = rel(&a, &n);
        assert!(e < 1e-4, "case {case}: pixel gradient relative error {e:e}");
    }
}

#[test]
fn extract_features_is_pure_and_row_independent() {
    let cfg = config(vec![3, 4], Some(1), CgnlScale::None);
    let m = model(cfg.clone(), 9);
    let rng = &mut substream(1, "test/crops");
    let crops: Vec<Vec<f64>> =
        (0..5).map(|_| (0..cfg.input_len()).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let a = extract_features(&crops, &m).unwrap();
    let b = extract_features(&crops, &m).unwrap();
    assert_eq!(a, b);
    for (i, c) in crops.iter().enumerate() {
        assert_eq!(extract_features(std::slice::from_ref(c), &m).unwrap()[0], a[i]);
    }
    let mut reversed = crops.clone();
    reversed.reverse();
    let r = extract_features(&reversed, &m).unwrap();
    assert!(r.iter().rev().eq(a.iter()));
}
