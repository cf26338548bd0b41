//! Shared test helpers: a double-double arithmetic oracle and table builders.
#![allow(dead_code)]

pub mod dd;
pub mod oracles;

use tabsynth::Table;

/// Builds a table from string cells with an inferred schema.
pub fn table(header: &[&str], rows: &[Vec<String>], target: &str) -> Table {
    let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    Table::from_raw_inferred(&header, rows, target).expect("fixture table")
}

pub fn cells<const N: usize>(rows: &[[&str; N]]) -> Vec<Vec<String>> {
    rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect()
}

/// Total-variation distance between two count maps.
pub fn tv<K: Ord + Clone>(a: &std::collections::BTreeMap<K, usize>, b: &std::collections::BTreeMap<K, usize>) -> f64 {
    let na: usize = a.values().sum();
    let nb: usize = b.values().sum();
    let keys: std::collections::BTreeSet<K> = a.keys().chain(b.keys()).cloned().collect();
    0.5 * keys
        .iter()
        .map(|k| {
            let pa = *a.get(k).unwrap_or(&0) as f64 / na.max(1) as f64;
            let pb = *b.get(k).unwrap_or(&0) as f64 / nb.max(1) as f64;
            (pa - pb).abs()
        })
        .sum::<f64>()
}
