//! Bayesian optimization against random search on a 5-D quadratic with a
//! known optimum, then a resumable search whose trials go to a JSONL log.

use mergeforge::boopt::{bo_search, read_history, BoOptions, HistoryLog, SearchSpace, TrialHistory};
use mergeforge::Result;

const TARGET: [f64; 5] = [0.2, 0.7, 0.5, 0.35, 0.9];

fn objective(x: &Vec<f64>) -> Result<f64> {
    Ok(-x.iter().zip(TARGET).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
}

fn main() -> Result<()> {
    let space = SearchSpace::unit_cube(5);
    let budget = 60;

    println!("seed  random     bo");
    for seed in 0..5 {
        let random = bo_search(&space, objective, &BoOptions::new(budget, budget, seed), TrialHistory::default(), None)?;
        let bo = bo_search(&space, objective, &BoOptions::new(budget, 10, seed), TrialHistory::default(), None)?;
        println!("{seed:>4}  {:.5}  {:.5}", random.best.score, bo.best.score);
    }

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("history.jsonl");
    let opts = BoOptions::new(30, 10, 42);

    // stop after 15 trials, then pick up from the log
    let mut log = HistoryLog::create(&path)?;
    bo_search(&space, objective, &BoOptions { budget: 15, ..opts.clone() }, TrialHistory::default(), Some(&mut log))?;
    let prior = read_history::<Vec<f64>>(&path)?;
    let mut log = HistoryLog::append_to(&path)?;
    let resumed = bo_search(&space, objective, &opts, prior, Some(&mut log))?;
    let straight = bo_search(&space, objective, &opts, TrialHistory::default(), None)?;
    println!(
        "resumed best {:.5} at trial {}, uninterrupted best {:.5} at trial {}",
        resumed.best.score, resumed.best.index, straight.best.score, straight.best.index
    );
    Ok(())
}
