//! Repeats a selection over several seeds and reports how often each
//! variable makes the top-k.
//!
//! cargo run --release --example sweep [epochs] [seeds]

use cvs::data::{Recipe, SyntheticSpec};
use cvs::selector::{sweep, SelectionRequest};
use cvs::trainer::TrainConfig;

fn main() -> cvs::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(4000, |a| a.parse().expect("epochs"));
    let n: u64 = args.next().map_or(5, |a| a.parse().expect("seeds"));

    let ds = Recipe::Eq7.generate(SyntheticSpec::with_seed(1))?;
    let req = SelectionRequest {
        condition: vec!["v1".into()],
        k: 5,
        config: TrainConfig {
            max_epochs: epochs,
            ..TrainConfig::default()
        },
    };
    let seeds: Vec<u64> = (1..=n).collect();
    let agg = sweep(&ds, &req, &seeds)?;
    println!("variable   mean    std   top-5 freq");
    for (i, name) in agg.candidates.iter().enumerate() {
        println!("{name:<8} {:.4} {:.4}   {:.2}", agg.mean[i], agg.std[i], agg.frequency[i]);
    }
    Ok(())
}
