//! In-process map-reduce over a list of tasks (usually datastore chunks).
//!
//! Map calls run on a pool of scoped worker threads pulling task indices from
//! a shared counter. Partials flow back to the calling thread, which folds
//! them with a fixed pairwise tree keyed by task index: the shape of the tree
//! depends only on the task count, so results do not depend on worker count
//! or completion order.

use std::collections::HashMap;
use std::fmt::Display;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use crate::ingest::{ChunkInfo, DataStore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MapReduceError {
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("map failed on chunk {chunk_id}: {cause}")]
    MapFailed { chunk_id: usize, cause: String },
}

/// Logical CPU count, or 1 if it cannot be determined.
pub fn default_workers() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Deterministic pairwise fold. Level 0 holds the leaves; node `(l, i)`
/// combines `(l-1, 2i)` and `(l-1, 2i+1)`, and a trailing unpaired node is
/// promoted unchanged.
struct TreeFold<P, R> {
    level_sizes: Vec<usize>,
    pending: HashMap<(usize, usize), P>,
    root: Option<P>,
    reduce_fn: R,
}

impl<P, R: Fn(P, P) -> P> TreeFold<P, R> {
    fn new(leaves: usize, reduce_fn: R) -> Self {
        let mut level_sizes = vec![leaves];
        while *level_sizes.last().unwrap() > 1 {
            let n = *level_sizes.last().unwrap();
            level_sizes.push(n.div_ceil(2));
        }
        TreeFold {
            level_sizes,
            pending: HashMap::new(),
            root: None,
            reduce_fn,
        }
    }

    fn insert(&mut self, leaf: usize, value: P) {
        let (mut level, mut idx, mut value) = (0, leaf, value);
        loop {
            if level + 1 == self.level_sizes.len() {
                self.root = Some(value);
                return;
            }
            let sibling = idx ^ 1;
            if sibling >= self.level_sizes[level] {
                // unpaired tail node
            } else if let Some(other) = self.pending.remove(&(level, sibling)) {
                value = if idx < sibling {
                    (self.reduce_fn)(value, other)
                } else {
                    (self.reduce_fn)(other, value)
                };
            } else {
                self.pending.insert((level, idx), value);
                return;
            }
            level += 1;
            idx /= 2;
        }
    }
}

/// Maps every task exactly once on `workers` threads and folds the partials.
/// The first map failure cancels tasks not yet started and is returned; no
/// partial result escapes.
pub fn run_tasks<T, P, E, M, R>(
    tasks: &[T],
    workers: usize,
    map_fn: M,
    reduce_fn: R,
    identity: P,
) -> Result<P, MapReduceError>
where
    T: Sync,
    P: Send,
    E: Display,
    M: Fn(&T) -> Result<P, E> + Sync,
    R: Fn(P, P) -> P,
{
    if workers == 0 {
        return Err(MapReduceError::NoWorkers);
    }
    if tasks.is_empty() {
        return Ok(identity);
    }

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let mut fold = TreeFold::new(tasks.len(), reduce_fn);
    let mut failure: Option<MapReduceError> = None;

    thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, Result<P, String>)>();
        for _ in 0..workers.min(tasks.len()) {
            let tx = tx.clone();
            let (next, abort, map_fn) = (&next, &abort, &map_fn);
            scope.spawn(move || loop {
                if abort.load(Ordering::Acquire) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::AcqRel);
                if i >= tasks.len() {
                    break;
                }
                let out = map_fn(&tasks[i]).map_err(|e| e.to_string());
                let failed = out.is_err();
                if tx.send((i, out)).is_err() || failed {
                    break;
                }
            });
        }
        drop(tx);

        for (i, out) in rx {
            match out {
                Ok(partial) if failure.is_none() => fold.insert(i, partial),
                Ok(_) => {}
                Err(cause) => {
                    abort.store(true, Ordering::Release);
                    if failure.is_none() {
                        failure = Some(MapReduceError::MapFailed { chunk_id: i, cause });
                    }
                }
            }
        }
    });

    if let Some(err) = failure {
        return Err(err);
    }
    let TreeFold {
        root, reduce_fn, ..
    } = fold;
    let root = root.expect("every task reported a partial");
    Ok(reduce_fn(identity, root))
}

/// A map-reduce pass over the chunks of one datastore.
pub struct MapReduceJob<'s, P, M, R> {
    pub store: &'s DataStore,
    pub map_fn: M,
    pub reduce_fn: R,
    pub identity: P,
    pub workers: usize,
}

impl<'s, P, E, M, R> MapReduceJob<'s, P, M, R>
where
    P: Send,
    E: Display,
    M: Fn(&ChunkInfo) -> Result<P, E> + Sync,
    R: Fn(P, P) -> P,
{
    pub fn run(self) -> Result<P, MapReduceError> {
        run_tasks(
            self.store.chunks(),
            self.workers,
            self.map_fn,
            self.reduce_fn,
            self.identity,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_datastore, ImageRecord};
    use rand::{Rng, SeedableRng};
    use std::sync::Mutex;

    fn store(n: usize, chunk: usize, len: usize, seed: u64) -> DataStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let imgs: Vec<ImageRecord> = (0..n)
            .map(|i| {
                let px = (0..len).map(|_| rng.gen_range(-1e3..1e3)).collect();
                ImageRecord::new(format!("i{i}"), len, 1, px).unwrap()
            })
            .collect();
        build_datastore(&imgs, chunk).unwrap()
    }

    #[test]
    fn counts_images() {
        let s = store(5, 2, 3, 0);
        let total = MapReduceJob {
            store: &s,
            map_fn: |c: &ChunkInfo| Ok::<_, String>(c.len()),
            reduce_fn: |a, b| a + b,
            identity: 0usize,
            workers: 3,
        }
        .run()
        .unwrap();
        assert_eq!(total, 5);
    }

    #[test]
    fn identity_with_single_chunk() {
        let s = store(2, 10, 3, 0);
        let out = MapReduceJob {
            store: &s,
            map_fn: |_: &ChunkInfo| Ok::<_, String>(vec![1.5, 2.5]),
            reduce_fn: |a: Vec<f64>, b: Vec<f64>| {
                if a.is_empty() {
                    b
                } else if b.is_empty() {
                    a
                } else {
                    a.iter().zip(&b).map(|(x, y)| x + y).collect()
                }
            },
            identity: Vec::new(),
            workers: 1,
        }
        .run()
        .unwrap();
        assert_eq!(out, vec![1.5, 2.5]);
    }

    #[test]
    fn vector_sum_matches_sequential_fold() {
        let s = store(100, 7, 16, 11);
        let sequential: Vec<f64> = (0..16)
            .map(|j| {
                let mut acc = 0.0;
                for c in 0..s.chunks().len() {
                    let block = s.read_chunk(c).unwrap();
                    for img in block.chunks(16) {
                        acc += img[j];
                    }
                }
                acc
            })
            .collect();
        let norm: f64 = sequential.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut runs = Vec::new();
        for workers in [1, 2, 8] {
            let sum = MapReduceJob {
                store: &s,
                map_fn: |c: &ChunkInfo| {
                    let block = s.read_chunk(c.chunk_id)?;
                    let mut acc = vec![0.0; 16];
                    for img in block.chunks(16) {
                        for (a, v) in acc.iter_mut().zip(img) {
                            *a += v;
                        }
                    }
                    Ok::<_, crate::ingest::IngestError>(acc)
                },
                reduce_fn: |a: Vec<f64>, b: Vec<f64>| {
                    if a.is_empty() {
                        return b;
                    }
                    a.iter().zip(&b).map(|(x, y)| x + y).collect()
                },
                identity: Vec::new(),
                workers,
            }
            .run()
            .unwrap();
            let diff: f64 = sum
                .iter()
                .zip(&sequential)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(diff <= 1e-10 * norm, "workers={workers} diff={diff}");
            runs.push(sum);
        }
        // fixed tree shape: bit-identical across worker counts
        assert_eq!(runs[0], runs[1]);
        assert_eq!(runs[0], runs[2]);
    }

    #[test]
    fn each_chunk_mapped_once() {
        let s = store(37, 3, 2, 1);
        for workers in 1..=8 {
            let seen = Mutex::new(Vec::new());
            MapReduceJob {
                store: &s,
                map_fn: |c: &ChunkInfo| {
                    seen.lock().unwrap().push(c.chunk_id);
                    Ok::<_, String>(())
                },
                reduce_fn: |_, _| (),
                identity: (),
                workers,
            }
            .run()
            .unwrap();
            let mut ids = seen.into_inner().unwrap();
            ids.sort_unstable();
            assert_eq!(ids, (0..s.chunks().len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn failure_aborts_with_chunk_id() {
        let s = store(20, 2, 2, 1);
        for workers in [1, 4] {
            let err = MapReduceJob {
                store: &s,
                map_fn: |c: &ChunkInfo| {
                    if c.chunk_id == 6 {
                        Err(format!("bad chunk {}", c.chunk_id))
                    } else {
                        Ok(1usize)
                    }
                },
                reduce_fn: |a, b| a + b,
                identity: 0,
                workers,
            }
            .run()
            .unwrap_err();
            assert_eq!(
                err,
                MapReduceError::MapFailed {
                    chunk_id: 6,
                    cause: "bad chunk 6".into()
                }
            );
        }
    }

    #[test]
    fn zero_workers_rejected() {
        let r = run_tasks(&[1], 0, |x: &i32| Ok::<_, String>(*x), |a, b| a + b, 0);
        assert_eq!(r, Err(MapReduceError::NoWorkers));
    }

    #[test]
    fn tree_order_is_fixed() {
        // non-commutative reduce exposes the tree shape
        let tasks: Vec<usize> = (0..5).collect();
        let out = run_tasks(
            &tasks,
            3,
            |t: &usize| Ok::<_, String>(t.to_string()),
            |a: String, b: String| {
                if a.is_empty() {
                    b
                } else {
                    format!("({a}{b})")
                }
            },
            String::new(),
        )
        .unwrap();
        assert_eq!(out, "(((01)(23))4)");
    }

    proptest::proptest! {
        #[test]
        fn float_sum_independent_of_workers(
            values in proptest::collection::vec(-1e6f64..1e6, 1..200),
            workers in 1usize..8,
        ) {
            let seq = run_tasks(&values, 1, |v: &f64| Ok::<_, String>(*v), |a, b| a + b, 0.0).unwrap();
            let par = run_tasks(&values, workers, |v: &f64| Ok::<_, String>(*v), |a, b| a + b, 0.0).unwrap();
            proptest::prop_assert_eq!(seq, par);
        }
    }
}
