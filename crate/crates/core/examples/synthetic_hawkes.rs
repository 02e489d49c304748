//! Simulates the grouped multivariate Hawkes testbed and prints per-group
//! event statistics.

use ctxagg::data::Split;
use ctxagg::synth::{event_counts, simulate, GroupedSpec};

fn main() -> ctxagg::Result<()> {
    let spec = GroupedSpec {
        n_users: 40,
        events_per_user: 150.0,
        ..GroupedSpec::default()
    };
    let config = spec.build()?;
    println!(
        "{} users, horizon {:.1}, expected {:.0} events",
        config.n_users(),
        config.horizon,
        config.expected_events()
    );
    let data = simulate(&config, 7)?;
    let counts = event_counts(&config, &data.dataset);
    println!("simulated {} events, config hash {}", counts.iter().sum::<usize>(), data.config_hash);
    for (label, n) in data.dataset.label_histogram() {
        let users: Vec<_> = data.dataset.sequences.values().filter(|s| s.label == Some(label)).collect();
        let events: usize = users.iter().map(|s| s.len()).sum();
        println!("group {label}: {n} users, {:.1} events/user", events as f64 / users.len() as f64);
    }
    let ds = ctxagg::data::split_by_user(&data.dataset, 0.3, 0)?;
    println!(
        "train/test users: {}/{}, median train gap {:.4}",
        ds.users(Split::Train).len(),
        ds.users(Split::Test).len(),
        ds.median_inter_event_time(Split::Train).unwrap_or(f64::NAN)
    );
    Ok(())
}
