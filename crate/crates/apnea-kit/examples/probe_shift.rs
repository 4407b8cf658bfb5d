use apnea_kit::config::{Flavor, RunConfig};
use apnea_kit::pipeline::run::shifted_spo2_eval;

fn main() {
    let config: RunConfig =
        serde_json::from_str(&std::fs::read_to_string(std::env::args().nth(1).unwrap()).unwrap())
            .unwrap();
    for flavor in [Flavor::RespSpo2, Flavor::RespSpo2Robust] {
        let base = shifted_spo2_eval(&config, flavor, 0.0).unwrap();
        let shifted = shifted_spo2_eval(&config, flavor, 25.0).unwrap();
        let mean = |v: &[(String, Option<f64>)]| {
            let xs: Vec<f64> = v.iter().filter_map(|r| r.1).collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        println!(
            "{flavor:?}: base {:.4} shifted {:.4} degradation {:.4}",
            mean(&base),
            mean(&shifted),
            mean(&base) - mean(&shifted)
        );
    }
}
