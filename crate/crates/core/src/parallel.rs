//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper returns results in input order, so reductions done by the
//! caller over the returned vector have a fixed order no matter which policy
//! ran the map. With the `parallel` feature disabled both policies execute
//! sequentially.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecPolicy {
    Sequential,
    #[default]
    Parallel,
}

impl ExecPolicy {
    /// The policy that will actually run given the compiled features.
    pub fn effective(self) -> Self {
        if cfg!(feature = "parallel") {
            self
        } else {
            ExecPolicy::Sequential
        }
    }
}

pub fn map_range<R, F>(policy: ExecPolicy, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match policy.effective() {
        #[cfg(feature = "parallel")]
        ExecPolicy::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

pub fn map_slice<I, R, F>(policy: ExecPolicy, items: &[I], f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(&I) -> R + Sync + Send,
{
    map_range(policy, items.len(), |i| f(&items[i]))
}

pub fn for_each_mut<I, F>(policy: ExecPolicy, items: &mut [I], f: F)
where
    I: Send,
    F: Fn(usize, &mut I) + Sync + Send,
{
    match policy.effective() {
        #[cfg(feature = "parallel")]
        ExecPolicy::Parallel => {
            use rayon::prelude::*;
            items.par_iter_mut().enumerate().for_each(|(i, it)| f(i, it));
        }
        _ => items.iter_mut().enumerate().for_each(|(i, it)| f(i, it)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_policies_preserve_order() {
        let seq = map_range(ExecPolicy::Sequential, 100, |i| i * i);
        let par = map_range(ExecPolicy::Parallel, 100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }
}
