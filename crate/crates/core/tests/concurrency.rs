use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;

use blink_core::verifier::{audit, run_stress, Partition, StressConfig};
use blink_core::{BLinkTree, LatchKind, TreeOptions};

fn key(i: u64) -> Vec<u8> {
    format!("key{i:08}").into_bytes()
}

fn stress(opts: &TreeOptions, cfg: StressConfig) {
    let tree = BLinkTree::in_memory(opts).unwrap();
    let report = run_stress(&tree, &cfg).unwrap();
    assert!(report.passed(), "{report}");
    assert_eq!(report.access_intent_waits, 0);
}

#[test]
fn interleaved_small_pages() {
    stress(
        &TreeOptions::default().page_bits(9),
        StressConfig { workers: 6, ops_per_worker: 8_000, keys_per_worker: 500, ..Default::default() },
    );
}

#[test]
fn contiguous_partitions() {
    stress(
        &TreeOptions::default().page_bits(10),
        StressConfig {
            workers: 4,
            ops_per_worker: 8_000,
            keys_per_worker: 1_000,
            partition: Partition::Contiguous,
            ..Default::default()
        },
    );
}

#[test]
fn delete_heavy() {
    stress(
        &TreeOptions::default().page_bits(9),
        StressConfig {
            workers: 8,
            ops_per_worker: 6_000,
            keys_per_worker: 200,
            mix: "30/45/20/5".parse().unwrap(),
            seed: 7,
            ..Default::default()
        },
    );
}

#[test]
fn without_access_intent() {
    let opts = TreeOptions::default().page_bits(9).access_intent(false);
    let tree = BLinkTree::in_memory(&opts).unwrap();
    let cfg = StressConfig { workers: 6, ops_per_worker: 6_000, keys_per_worker: 300, ..Default::default() };
    let report = run_stress(&tree, &cfg).unwrap();
    assert!(report.passed(), "{report}");
    assert_eq!(tree.stats().pages_freed, 0);
    assert_eq!(report.audit.leaked_pages, tree.stats().pages_leaked);
    assert_eq!(tree.latches().stats().get(LatchKind::AccessIntent).acquisitions, 0);
}

#[test]
fn tiny_cache_under_contention() {
    let opts = TreeOptions { cache_pages: 4, ..TreeOptions::default().page_bits(9) };
    let dir = tempfile::tempdir().unwrap();
    let tree = BLinkTree::create(Some(&dir.path().join("t")), &opts).unwrap();
    let cfg = StressConfig { workers: 4, ops_per_worker: 4_000, keys_per_worker: 300, ..Default::default() };
    let report = run_stress(&tree, &cfg).unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn repeated_runs_on_one_tree() {
    let tree = BLinkTree::in_memory(&TreeOptions::default().page_bits(9)).unwrap();
    for seed in 0..3 {
        let cfg = StressConfig { workers: 4, ops_per_worker: 3_000, keys_per_worker: 250, seed, ..Default::default() };
        let report = run_stress(&tree, &cfg).unwrap();
        assert!(report.passed(), "seed {seed}: {report}");
    }
}

#[test]
fn scans_see_stable_keys_while_neighbours_churn() {
    // even ids never change; odd ids are inserted and removed repeatedly
    const CHURN: u64 = 1 << 40;
    let tree = BLinkTree::in_memory(&TreeOptions::default().page_bits(9)).unwrap();
    for i in (0..4_000).step_by(2) {
        tree.put(&key(i), i).unwrap();
    }
    let running = AtomicUsize::new(3);
    let mut scans = 0;
    thread::scope(|s| {
        for w in 0..3u64 {
            let tree = &tree;
            let running = &running;
            s.spawn(move || {
                for round in 0..15 {
                    for i in (1 + 2 * w..4_000).step_by(6) {
                        tree.put(&key(i), CHURN + round).unwrap();
                    }
                    for i in (1 + 2 * w..4_000).step_by(6) {
                        assert!(tree.remove(&key(i)).unwrap());
                    }
                }
                running.fetch_sub(1, Ordering::Relaxed);
            });
        }
        while running.load(Ordering::Relaxed) > 0 {
            let all = tree.scan(None, None).unwrap();
            assert!(all.windows(2).all(|w| w[0].0 < w[1].0));
            let stable = all.iter().filter(|(_, v)| *v < CHURN).count();
            assert_eq!(stable, 2_000, "a stable key went missing");
            assert!(all.iter().all(|(k, v)| *v >= CHURN || *k == key(*v)));
            scans += 1;
        }
    });
    assert!(scans > 0);
    let report = audit(&tree, true);
    assert!(report.passed(), "{report}");
    assert_eq!(report.live_keys, 2_000);
}

#[test]
fn keys_reachable_between_fence_delete_and_repoint() {
    use std::sync::{mpsc, Arc, Mutex};
    use blink_core::TreeEvent;

    let tree = Arc::new(BLinkTree::in_memory(&TreeOptions::default().page_bits(9)).unwrap());
    let mut n = 0;
    while tree.height() < 2 {
        tree.put(&key(n), n).unwrap();
        n += 1;
    }
    let root = tree.root_page();
    let l_page = tree.read_node_unlatched(root).unwrap().value(0);
    let r_page = tree.read_node_unlatched(l_page).unwrap().link();
    let l = tree.read_node_unlatched(l_page).unwrap();
    let l_keys: Vec<Vec<u8>> = (0..l.count()).filter(|&s| !l.is_key_deleted(s)).map(|s| l.key(s).to_vec()).collect();
    for k in &l_keys[1..] {
        tree.remove(k).unwrap();
    }
    let l_fence = l.key(l.count() - 1).to_vec();
    let mut expected = tree.scan(None, None).unwrap();
    expected.retain(|(k, _)| k != &l_keys[0]);

    // park the consolidator after the parent's left fence entry is deleted
    // but before the right fence entry is repointed
    let (parked_tx, parked_rx) = mpsc::channel::<()>();
    let (resume_tx, resume_rx) = mpsc::channel::<()>();
    let state = Mutex::new((false, Some((parked_tx, resume_rx))));
    tree.set_hook(Some(Arc::new(move |e: &TreeEvent| {
        let mut st = state.lock().unwrap();
        match e {
            TreeEvent::Consolidate { step: 6, right, .. } if *right == r_page => st.0 = true,
            TreeEvent::Released { page, kind: LatchKind::WriteLock, .. } if st.0 && *page == root => {
                if let Some((tx, rx)) = st.1.take() {
                    drop(st);
                    tx.send(()).unwrap();
                    rx.recv().unwrap();
                }
            }
            _ => {}
        }
    })));

    let deleter = {
        let tree = tree.clone();
        let last = l_keys[0].clone();
        thread::spawn(move || tree.remove(&last).unwrap())
    };
    parked_rx.recv_timeout(std::time::Duration::from_secs(10)).expect("consolidation never reached step 6");
    let parent = tree.read_node_unlatched(root).unwrap();
    assert!((0..parent.count()).any(|s| parent.key(s) == l_fence.as_slice() && parent.is_key_deleted(s)));
    let reader = {
        let tree = tree.clone();
        let expected = expected.clone();
        thread::spawn(move || {
            for (k, v) in &expected {
                assert_eq!(tree.get(k).unwrap(), Some(*v), "{k:?}");
            }
            tree.scan(None, None).unwrap()
        })
    };
    let seen = reader.join().unwrap();
    assert_eq!(seen, expected);
    resume_tx.send(()).unwrap();
    assert!(deleter.join().unwrap());
    tree.set_hook(None);
    assert!(tree.stats().left_hops > 0);
    let report = audit(&tree, true);
    assert!(report.passed(), "{report}");
}
