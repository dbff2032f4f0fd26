use predictor_lab::adaptation::AdaptationLaw;
use predictor_lab::dataset::{generate_dataset, resolve_sample, GenerationConfig, PredictorDataset};
use predictor_lab::predictor::FixedPointOptions;
use predictor_lab::simulation::{run, Baseline, PredictorChoice, SimulationConfig};
use predictor_lab::systems::SystemName;

fn linear(a: f64) -> SimulationConfig {
    let mut c = SimulationConfig::preset(&SystemName::Linear { a, b_in: 1.0 });
    c.law = AdaptationLaw::Frozen;
    c
}

#[test]
fn exact_delay_linear_loop_decays_after_one_delay() {
    let mut c = linear(1.0);
    c.t_final = 8.0;
    let tr = run(&c).unwrap();
    assert!(!tr.diverged());
    let x_delay = tr.steps.iter().find(|s| s.t >= c.d_true).unwrap().x[0];
    let x_end = tr.last().unwrap().x[0];
    let expected = x_delay * (-(c.t_final - c.d_true)).exp();
    assert!((x_end - expected).abs() < 1e-3 * x_delay.abs(), "{x_end} vs {expected}");
}

#[test]
fn open_loop_unstable_plant_is_reported_as_divergence() {
    let mut c = linear(2.0);
    c.predictor = PredictorChoice::None;
    c.baseline = Baseline::OpenLoop;
    c.t_final = 10.0;
    let tr = run(&c).unwrap();
    assert!(tr.diverged());
    assert!(tr.divergence.as_ref().unwrap().0 < c.t_final);
}

#[test]
fn numeric_backends_give_the_same_protein_trajectory() {
    let mut c = SimulationConfig::protein();
    c.t_final = 4.0;
    let fp = run(&c).unwrap();
    c.predictor = PredictorChoice::OdeMarch;
    let march = run(&c).unwrap();
    let (a, b) = (fp.last().unwrap(), march.last().unwrap());
    for k in 0..2 {
        assert!((a.x[k] - b.x[k]).abs() < 1e-3 * (1.0 + a.x[k].abs()));
    }
    assert!((a.d_hat - b.d_hat).abs() < 1e-3);
}

#[test]
fn runs_are_deterministic_and_stay_in_delay_bounds() {
    let mut c = SimulationConfig::chemostat();
    c.t_final = 3.0;
    c.predictor = PredictorChoice::FixedPoint;
    let a = run(&c).unwrap();
    let b = run(&c).unwrap();
    let mut ca = Vec::new();
    let mut cb = Vec::new();
    a.write_csv(&mut ca).unwrap();
    b.write_csv(&mut cb).unwrap();
    let strip = |v: &[u8]| -> Vec<String> {
        String::from_utf8_lossy(v).lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
    };
    assert_eq!(strip(&ca), strip(&cb));
    assert!(a.steps.iter().all(|s| s.d_hat >= c.d_min && s.d_hat <= c.d_max));
    assert!(a.steps.iter().all(|s| s.u >= 0.0 && s.u <= 5.0));
}

#[test]
fn dataset_targets_are_fixed_point_solutions_and_round_trip() {
    let mut g = GenerationConfig::preset(&SystemName::Protein, 6, 11);
    g.samples_per_run = 3;
    let ds = generate_dataset(&g).unwrap();
    assert_eq!(ds.len(), 6);
    for s in &ds.samples {
        let again = resolve_sample(&ds, s, FixedPointOptions::default()).unwrap();
        let err = again.iter().zip(&s.target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "target mismatch {err}");
    }
    let mut bytes = Vec::new();
    ds.write_to(&mut bytes).unwrap();
    let back = PredictorDataset::read_from(&mut bytes.as_slice()).unwrap();
    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    assert_eq!(bytes, again);
    assert_eq!(back.provenance.config_hash, g.hash());
}
