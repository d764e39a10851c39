//! A relevant variable `v8` and its exact copy `v8r` compete for the same
//! share of the mask.
//!
//! cargo run --release --example duplicate [epochs] [seed]

use cvs::data::{Recipe, SyntheticSpec};
use cvs::selector::{redundancy_flags, SelectionRequest, run_selection};
use cvs::trainer::TrainConfig;

fn main() -> cvs::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(4000, |a| a.parse().expect("epochs"));
    let seed = args.next().map_or(1, |a| a.parse().expect("seed"));

    let ds = Recipe::Eq7Duplicate.generate(SyntheticSpec::with_seed(seed))?;
    let req = SelectionRequest {
        condition: vec!["v1".into()],
        k: 6,
        config: TrainConfig {
            max_epochs: epochs,
            ..TrainConfig::with_seed(seed)
        },
    };
    let report = run_selection(&ds, &req)?.report;
    println!("top-6: {:?}", report.top_k);
    println!("v8 = {:.4}, v8r = {:.4}", report.score("v8").unwrap(), report.score("v8r").unwrap());
    let pairs = [("v8".to_string(), "v8r".to_string())];
    println!("flagged redundant: {:?}", redundancy_flags(&report, &pairs));
    Ok(())
}
