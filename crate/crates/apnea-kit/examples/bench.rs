use apnea_kit::featurize::{build_registry, extract_windows};
use apnea_kit::recording::{RecordingBundle, SignalTrace};
use std::time::Instant;

fn main() {
    let hours = 8.0;
    let n = (hours * 3600.0 * 10.0) as usize;
    let resp: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / 10.0;
            (2.0 * std::f64::consts::PI * 0.25 * t).sin() * (1.0 + 0.2 * (t * 0.01).sin())
                + 0.05 * (t * 3.7).sin()
        })
        .collect();
    let spo2: Vec<f64> = (0..(hours * 3600.0) as usize)
        .map(|i| 97.0 + (i as f64 * 0.01).sin())
        .collect();
    let bundle = RecordingBundle::new(
        "s".into(),
        "r".into(),
        SignalTrace::new(resp, 10.0, 0.0).unwrap(),
        Some(SignalTrace::new(spo2, 1.0, 0.0).unwrap()),
        None,
        None,
        vec![],
    )
    .unwrap();
    let mut reg = build_registry(true, false);
    reg.push(apnea_kit::featurize::registry::spo2_spec(true));
    let t0 = Instant::now();
    let m = extract_windows(&bundle, &reg, 1, 90).unwrap();
    println!(
        "extracted {} rows x {} cols in {:.1} s",
        m.n_rows(),
        m.n_cols(),
        t0.elapsed().as_secs_f64()
    );
}
