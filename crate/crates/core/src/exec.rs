//! Serial or data-parallel execution of independent work items.
//!
//! Results are always written to their item's slot, so the output order (and
//! any reduction performed over it afterwards) does not depend on scheduling.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Serial,
    #[default]
    Parallel,
}

impl Exec {
    /// `f(0), .., f(n-1)` in index order. Falls back to serial execution
    /// when built without the `parallel` feature.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Exec::Serial => (0..n).map(f).collect(),
            Exec::Parallel => par_map(n, f),
        }
    }
}

#[cfg(feature = "parallel")]
fn par_map<R: Send, F: Fn(usize) -> R + Sync + Send>(n: usize, f: F) -> Vec<R> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<R: Send, F: Fn(usize) -> R + Sync + Send>(n: usize, f: F) -> Vec<R> {
    (0..n).map(f).collect()
}

/// Number of worker threads `Exec::Parallel` will use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_keep_index_order() {
        let s = Exec::Serial.map(100, |i| i * i);
        let p = Exec::Parallel.map(100, |i| i * i);
        assert_eq!(s, p);
        assert_eq!(p[7], 49);
    }
}
