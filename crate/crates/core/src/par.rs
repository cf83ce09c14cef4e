//! Execution shim over rayon.
//!
//! With the `parallel` feature, [`Execution::Parallel`] runs independent tasks on a
//! dedicated rayon pool. Without it every mode falls back to a plain sequential map.
//! Either way results come back in input order, so reductions are deterministic.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Execution {
    Sequential,
    /// Worker-pool size; 0 lets rayon pick.
    Parallel(usize),
    #[default]
    Auto,
}

impl Execution {
    pub fn from_workers(workers: usize) -> Self {
        match workers {
            1 => Execution::Sequential,
            n => Execution::Parallel(n),
        }
    }

    /// Map `f` over `items`, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            match self {
                Execution::Sequential => items.iter().map(f).collect(),
                Execution::Auto => items.par_iter().map(f).collect(),
                Execution::Parallel(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                    Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
                    Err(_) => items.iter().map(f).collect(),
                },
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = self;
            items.iter().map(f).collect()
        }
    }

    /// Map over `0..n`.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        let idx: Vec<usize> = (0..n).collect();
        self.map(&idx, |&i| f(i))
    }
}
