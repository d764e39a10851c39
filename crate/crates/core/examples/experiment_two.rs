//! With `v2` and `v3` already chosen, the interaction term `10·v2·v3·v4`
//! makes `v4` the most useful addition.
//!
//! cargo run --release --example experiment_two [epochs] [seed]

use cvs::data::{Recipe, SyntheticSpec};
use cvs::selector::{run_selection, SelectionRequest};
use cvs::trainer::TrainConfig;

fn main() -> cvs::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(4000, |a| a.parse().expect("epochs"));
    let seed = args.next().map_or(1, |a| a.parse().expect("seed"));

    let ds = Recipe::Eq7.generate(SyntheticSpec::with_seed(seed))?;
    for condition in [vec!["v2"], vec!["v2", "v3"]] {
        let req = SelectionRequest {
            condition: condition.iter().map(|s| s.to_string()).collect(),
            k: 3,
            config: TrainConfig {
                max_epochs: epochs,
                ..TrainConfig::with_seed(seed)
            },
        };
        let report = run_selection(&ds, &req)?.report;
        let head: Vec<String> = report.ranking[..5]
            .iter()
            .map(|v| format!("{v}={:.3}", report.score(v).unwrap()))
            .collect();
        println!("given {condition:?}: {}", head.join(" "));
    }
    Ok(())
}
