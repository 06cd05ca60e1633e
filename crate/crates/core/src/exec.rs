//! Data-parallel map abstraction.
//!
//! The core crate does not spawn threads. Callers that want parallelism
//! supply an [`Executor`]; results are always returned in index order and
//! every reduction downstream is performed sequentially, so numerical
//! results do not depend on the executor or its thread count.

use alloc::vec::Vec;

pub trait Executor: Sync {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs every task on the calling thread.
#[derive(Debug, Default, Clone, Copy)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}
