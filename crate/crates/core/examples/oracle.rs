//! Exhaustive search over every 5-subset of 10 candidates, compared with
//! the mask ranking on the same data.
//!
//! cargo run --release --example oracle [oracle-epochs] [cvs-epochs]

use cvs::data::{gen_synthetic, SyntheticSpec};
use cvs::oracle::{agreement, exhaustive_search, OracleConfig};
use cvs::selector::{run_selection, SelectionRequest};
use cvs::trainer::TrainConfig;

fn main() -> cvs::Result<()> {
    let mut args = std::env::args().skip(1);
    let oracle_epochs = args.next().map_or(50, |a| a.parse().expect("epochs"));
    let cvs_epochs = args.next().map_or(4000, |a| a.parse().expect("epochs"));

    let ds = gen_synthetic(&SyntheticSpec {
        n_variables: 11,
        ..SyntheticSpec::with_seed(1)
    })?;
    let condition = vec!["v1".to_string()];
    let cfg = OracleConfig {
        epochs: oracle_epochs,
        ..OracleConfig::default()
    };
    let table = exhaustive_search(&ds, &condition, 5, &cfg)?;
    println!("{} subsets; best five:", table.results.len());
    for r in table.results.iter().take(5) {
        println!("  {:?} val mse {:.4}", r.subset, r.val_mse.unwrap_or(f64::NAN));
    }

    let req = SelectionRequest {
        condition,
        k: 5,
        config: TrainConfig {
            max_epochs: cvs_epochs,
            ..TrainConfig::with_seed(1)
        },
    };
    let report = run_selection(&ds, &req)?.report;
    println!("mask top-5: {:?}", report.top_k);
    println!("agreement: {}", agreement(&report, &table, 5)?);
    Ok(())
}
