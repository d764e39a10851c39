//! Loading a test-bench style table with a schema: a categorical column is
//! one-hot encoded and scored as one variable, an id column is excluded.
//!
//! cargo run --release --example csv_ingestion [epochs]

use cvs::data::{load_csv, write_schema, ColumnKind, ColumnRole, ColumnSchema};
use cvs::selector::{run_selection, SelectionRequest};
use cvs::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = std::env::args().nth(1).map_or(1500, |a| a.parse().expect("epochs"));
    let dir = std::env::temp_dir().join("cvs-csv-example");
    std::fs::create_dir_all(&dir)?;

    // Response depends on temperature, on the supply mode and on their
    // interaction; `fan` and `run` carry no signal.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let modes = ["eco", "normal", "boost"];
    let mut csv = String::from("run,temperature,mode,voltage,fan,response\n");
    for i in 0..1500 {
        let t: f64 = rng.random_range(0.0..1.0);
        let m = rng.random_range(0..3);
        let v: f64 = rng.random_range(0.0..1.0);
        let fan: f64 = rng.random_range(0.0..1.0);
        let y = 2.0 * t + [0.0, 1.0, 3.0][m] * v + rng.random_range(-0.1..0.1);
        csv.push_str(&format!("{i},{t},{},{v},{fan},{y}\n", modes[m]));
    }
    let csv_path = dir.join("bench.csv");
    std::fs::write(&csv_path, csv)?;

    use ColumnKind::*;
    use ColumnRole::*;
    let schema = vec![
        ColumnSchema::new("run", NumericDiscrete, Excluded),
        ColumnSchema::new("temperature", NumericContinuous, Preselected),
        ColumnSchema::new("mode", Categorical, Candidate),
        ColumnSchema::new("voltage", NumericContinuous, Candidate),
        ColumnSchema::new("fan", NumericContinuous, Candidate),
        ColumnSchema::new("response", NumericContinuous, Target),
    ];
    let schema_path = dir.join("bench.schema.json");
    write_schema(&schema, &schema_path)?;

    let ds = load_csv(&csv_path, &schema)?;
    println!("{} rows, encoded widths {:?}", ds.len(), ds.candidate_spans());
    let req = SelectionRequest {
        condition: ds.preselected_names(),
        k: 2,
        config: TrainConfig {
            max_epochs: epochs,
            ..TrainConfig::with_seed(1)
        },
    };
    let report = run_selection(&ds, &req)?.report;
    print!("{}", report.scores_csv()?);
    println!("files in {}", dir.display());
    Ok(())
}
