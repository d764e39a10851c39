//! Which variables matter once `v1` is known? Trains on the synthetic
//! benchmark, prints the live mask every 500 epochs, then the ranking.
//!
//! cargo run --release --example experiment_one [epochs] [seed]

use cvs::data::{Recipe, SyntheticSpec};
use cvs::selector::{run_selection_observed, SelectionRequest};
use cvs::trainer::{Control, TrainConfig};

fn main() -> cvs::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(4000, |a| a.parse().expect("epochs"));
    let seed = args.next().map_or(1, |a| a.parse().expect("seed"));

    let ds = Recipe::Eq7.generate(SyntheticSpec::with_seed(seed))?;
    let req = SelectionRequest {
        condition: vec!["v1".into()],
        k: 5,
        config: TrainConfig {
            max_epochs: epochs,
            ..TrainConfig::with_seed(seed)
        },
    };
    let sel = run_selection_observed(&ds, &req, |p| {
        if p.epoch % 500 == 0 {
            let mask: Vec<String> = p.mask.iter().map(|m| format!("{m:.3}")).collect();
            println!("epoch {:>4}  loss {:.4}  [{}]", p.epoch, p.loss, mask.join(" "));
        }
        Control::Continue
    })?;

    println!("\n{}", sel.report.scores_csv()?);
    println!("top-5: {:?}", sel.report.top_k);
    println!("converged at: {:?}", sel.report.converged_at);
    Ok(())
}
