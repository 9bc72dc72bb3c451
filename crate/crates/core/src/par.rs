//! Trial-level data parallelism.
//!
//! With the `parallel` feature (default) trial loops run on the rayon pool;
//! without it, or with [`Execution::Sequential`], they run in order on the
//! calling thread. Output order is the trial order either way.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Maps `f` over `0..count`, returning results in index order.
pub fn map_trials<T, F>(exec: Execution, count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..count).into_par_iter().map(f).collect()
        }
        _ => (0..count).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree_and_keep_order() {
        let f = |i: usize| (i * i) as u64;
        let seq = map_trials(Execution::Sequential, 1000, f);
        let par = map_trials(Execution::Parallel, 1000, f);
        assert_eq!(seq, par);
        assert_eq!(seq[31], 961);
    }
}
