use djgp::datagen::{generate, ExpansionKind, GeneratorKind, GeneratorSpec};
use djgp::elbo::train::{initialize, InitConfig};
use djgp::elbo::{elbo, train, TrainConfig};
use djgp::metrics::score;
use djgp::predict::{djgp_predict_all, PredictConfig};

fn small() -> (InitConfig, TrainConfig) {
    (InitConfig { latent_dim: 2, neighbors: 15, l1: 3, l2: 10 }, TrainConfig { steps: 25, ..TrainConfig::default() })
}

#[test]
fn training_then_prediction_on_projected_l2() {
    let spec = GeneratorSpec { n_train: 400, n_test: 8, expansion: Some((ExpansionKind::Rp, 6)), ..GeneratorSpec::l2() };
    let g = generate(&spec, 21).unwrap();
    let (init, tc) = small();
    let st = initialize(&g.train, &g.test.inputs, &init, &tc, 21).unwrap();
    assert_eq!(st.regions.len(), 8);
    let before = elbo(&st).unwrap();
    let (trained, report) = train(&st).unwrap();
    assert!(report.final_elbo >= before);
    assert!((elbo(&trained).unwrap() - report.final_elbo).abs() < 1e-6 * report.final_elbo.abs());

    let preds = djgp_predict_all(&trained, &g.test.inputs, &PredictConfig { samples: 3, ..PredictConfig::default() }, 4).unwrap();
    let again = djgp_predict_all(&trained, &g.test.inputs, &PredictConfig { samples: 3, ..PredictConfig::default() }, 4).unwrap();
    assert_eq!(preds, again);
    let pairs: Vec<(f64, f64)> = preds.iter().map(|p| (p.mean, p.variance)).collect();
    let t: Vec<f64> = g.test.targets.iter().copied().collect();
    let s = score(&pairs, &t).unwrap();
    assert!(s.rmse.is_finite() && s.mean_crps > 0.0);
}

#[test]
fn model_state_survives_json() {
    let spec = GeneratorSpec { kind: GeneratorKind::Lh, latent_dim: 2, n_train: 200, n_test: 3, expansion: None };
    let g = generate(&spec, 2).unwrap();
    let (init, tc) = small();
    let st = initialize(&g.train, &g.test.inputs, &init, &tc, 2).unwrap();
    let text = serde_json::to_string(&st).unwrap();
    let back: djgp::elbo::VariationalState = serde_json::from_str(&text).unwrap();
    assert_eq!(back, st);
    assert_eq!(elbo(&back).unwrap(), elbo(&st).unwrap());
}
