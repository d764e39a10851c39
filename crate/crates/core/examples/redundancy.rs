//! A condition variable that is a function of a candidate (`v7 := v1²`)
//! should push that candidate's score towards zero. The probe flags it.
//!
//! cargo run --release --example redundancy [epochs] [seed]

use cvs::data::{Recipe, SyntheticSpec};
use cvs::selector::{redundancy_probe, redundancy_threshold, SelectionRequest};
use cvs::trainer::TrainConfig;

fn main() -> cvs::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(4000, |a| a.parse().expect("epochs"));
    let seed = args.next().map_or(1, |a| a.parse().expect("seed"));

    let ds = Recipe::Eq7Redundant.generate(SyntheticSpec::with_seed(seed))?;
    let req = SelectionRequest {
        condition: vec!["v7".into()],
        k: 5,
        config: TrainConfig {
            max_epochs: epochs,
            ..TrainConfig::with_seed(seed)
        },
    };
    let pairs = [("v1".to_string(), "v7".to_string())];
    let report = redundancy_probe(&ds, &req, &pairs)?.report;
    let threshold = redundancy_threshold(report.candidates.len());
    println!("top-5: {:?}", report.top_k);
    println!("v1 = {:.4} (threshold {threshold:.4}), rank {}", report.score("v1").unwrap(), report.rank_of("v1").unwrap());
    println!("flagged redundant: {:?}", report.redundant);
    Ok(())
}
