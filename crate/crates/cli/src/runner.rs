//! Lane-parallel execution.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Instant;

use qcore::harness::Clock;

use crate::error::{CliError, Result};

/// Microseconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        WallClock(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_micros(&self) -> u64 {
        self.0.elapsed().as_micros() as u64
    }
}

/// Apply `f` to every item on up to `workers` threads. Results come back in
/// input order, so output never depends on scheduling; the first error in
/// that order wins.
pub fn map_lanes<I: Sync, T: Send>(items: &[I], workers: usize, f: impl Fn(&I) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let panicked = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= items.len() {
                        break;
                    }
                    let out = f(&items[i]);
                    *slots[i].lock().unwrap() = Some(out);
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join()).any(|r| r.is_err())
    });
    if panicked {
        return Err(CliError::Panic);
    }
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().unwrap_or(Err(CliError::Panic)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_input_order() {
        let items: Vec<u64> = (0..37).collect();
        for workers in [1, 3, 8, 64] {
            let out = map_lanes(&items, workers, |&x| Ok(x * x)).unwrap();
            assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
        }
    }

    #[test]
    fn first_error_in_order_wins() {
        let items: Vec<u64> = (0..10).collect();
        let err = map_lanes(&items, 4, |&x| {
            if x % 3 == 2 {
                Err(CliError::Usage(format!("bad {x}")))
            } else {
                Ok(x)
            }
        })
        .unwrap_err();
        assert_eq!(err.to_string(), "bad 2");
    }
}
