//! Wall-clock cost of each training and inference stage per aggregator.

use ctxagg::data::{fit_normalizer, split_by_user};
use ctxagg::encoder::{ColesConfig, EncoderConfig};
use ctxagg::eval::{bench_stages, BenchSetup, LocalEvalConfig, BENCH_METHODS, STAGES};
use ctxagg::synth::{simulate, GroupedSpec};

fn main() -> ctxagg::Result<()> {
    let spec = GroupedSpec {
        n_users: 60,
        events_per_user: 100.0,
        ..GroupedSpec::default()
    };
    let ds = split_by_user(&simulate(&spec.build()?, 0)?.dataset, 0.3, 0)?;
    let coles = ColesConfig {
        batch_size: 16,
        epochs: 2,
        ..ColesConfig::default()
    };
    let context: Vec<String> = ds.sequences.keys().cloned().collect();
    let timings = bench_stages(&BenchSetup {
        dataset: &ds,
        spec: fit_normalizer(&ds, 8)?,
        encoder: EncoderConfig { hidden: 16 },
        coles,
        aggregator_coles: coles,
        local: LocalEvalConfig {
            epochs: 10,
            ..LocalEvalConfig::default()
        },
        context: &context,
        methods: BENCH_METHODS.to_vec(),
        seed: 0,
    })?;
    print!("{:<30}", "stage");
    for m in &timings.methods {
        print!("{:>18}", m.name());
    }
    println!();
    for (stage, row) in STAGES.iter().zip(&timings.seconds) {
        print!("{stage:<30}");
        for s in row {
            match s {
                Some(s) => print!("{s:>17.3}s"),
                None => print!("{:>18}", "-"),
            }
        }
        println!();
    }
    Ok(())
}
