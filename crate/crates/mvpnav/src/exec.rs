//! Thread-pool executor. Items are split into contiguous groups, one per
//! thread, and results are reassembled in item order.

use mvpnav_core::exec::{Executor, Sequential};

#[derive(Clone, Copy, Debug)]
pub struct Threaded {
    threads: usize,
}

impl Threaded {
    /// `threads` is clamped to at least 1.
    pub fn new(threads: usize) -> Self {
        Self {
            threads: threads.max(1),
        }
    }

    pub fn threads(&self) -> usize {
        self.threads
    }
}

impl Executor for Threaded {
    fn map_mut<T, R, F>(&self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(usize, &mut T) -> R + Sync,
    {
        if self.threads == 1 || items.len() < 2 {
            return Sequential.map_mut(items, f);
        }
        let per = items.len().div_ceil(self.threads);
        let f = &f;
        std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks_mut(per)
                .enumerate()
                .map(|(g, group)| {
                    s.spawn(move || {
                        group
                            .iter_mut()
                            .enumerate()
                            .map(|(i, t)| f(g * per + i, t))
                            .collect::<Vec<R>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker thread panicked"))
                .collect()
        })
    }

    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync,
    {
        if self.threads == 1 || items.len() < 2 {
            return Sequential.map(items, f);
        }
        let per = items.len().div_ceil(self.threads);
        let f = &f;
        std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(per)
                .enumerate()
                .map(|(g, group)| {
                    s.spawn(move || {
                        group
                            .iter()
                            .enumerate()
                            .map(|(i, t)| f(g * per + i, t))
                            .collect::<Vec<R>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker thread panicked"))
                .collect()
        })
    }
}

/// `threads = 0` selects strict sequential execution.
#[derive(Clone, Copy, Debug)]
pub enum AnyExecutor {
    Sequential,
    Threaded(Threaded),
}

impl AnyExecutor {
    pub fn from_threads(threads: usize) -> Self {
        if threads == 0 {
            AnyExecutor::Sequential
        } else {
            AnyExecutor::Threaded(Threaded::new(threads))
        }
    }
}

impl Executor for AnyExecutor {
    fn map_mut<T, R, F>(&self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(usize, &mut T) -> R + Sync,
    {
        match self {
            AnyExecutor::Sequential => Sequential.map_mut(items, f),
            AnyExecutor::Threaded(t) => t.map_mut(items, f),
        }
    }

    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync,
    {
        match self {
            AnyExecutor::Sequential => Sequential.map(items, f),
            AnyExecutor::Threaded(t) => t.map(items, f),
        }
    }
}
