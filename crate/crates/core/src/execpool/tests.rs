use std::sync::{Arc, Mutex};

use proptest::prelude::*;

use super::*;

fn sim(run: f64, rss: f64) -> Vec<String> {
    SimScript {
        run: Duration::from_secs_f64(run),
        rss_mib: rss,
        rss_at: Duration::ZERO,
        exit: 0,
    }
    .argv()
}

fn sim_ramp(run: f64, rss: f64, rss_at: f64) -> Vec<String> {
    SimScript {
        run: Duration::from_secs_f64(run),
        rss_mib: rss,
        rss_at: Duration::from_secs_f64(rss_at),
        exit: 0,
    }
    .argv()
}

fn sim_exit(run: f64, code: i32) -> Vec<String> {
    let mut argv = sim(run, 1.0);
    argv[4] = format!("exit={code}");
    argv
}

fn pool(topo: &TopologyMap, ram: f64) -> ExecPool<SimBackend> {
    let cfg = PoolConfig {
        mem_limit_fraction: 1.0,
        ..PoolConfig::default()
    };
    ExecPool::new(cfg, topo, SimBackend::new(ram)).unwrap()
}

fn kinds_for<'a>(
    p: &'a ExecPool<SimBackend>,
    job: &'a str,
) -> impl Iterator<Item = EventKind> + 'a {
    p.events()
        .iter()
        .filter(move |e| e.job == job)
        .map(|e| e.kind)
}

#[test]
fn third_job_waits_for_a_free_slot() {
    let mut p = pool(&TopologyMap::flat(2), 1e6);
    let ids: Vec<JobId> = (0..3)
        .map(|i| {
            p.submit(Job::new(format!("j{i}"), sim(1.0 + i as f64, 1.0)))
                .unwrap()
        })
        .collect();
    p.begin_run();
    assert!(p.step().unwrap());
    assert_eq!(p.job_state(ids[0]), JobState::Running);
    assert_eq!(p.job_state(ids[1]), JobState::Running);
    assert_eq!(p.job_state(ids[2]), JobState::Pending);
    while p.job_state(ids[2]) == JobState::Pending {
        assert!(p.step().unwrap());
    }
    assert_eq!(p.job_state(ids[0]), JobState::Done);
    while p.step().unwrap() {}
    let s = p.finish_run();
    assert_eq!(s.done, 3);
    assert_eq!(s.max_running, 2);
}

#[test]
fn submission_validation() {
    let mut p = pool(&TopologyMap::flat(1), 1e6);
    p.submit(Job::new("a", sim(1.0, 1.0))).unwrap();
    assert!(
        matches!(p.submit(Job::new("a", sim(1.0, 1.0))), Err(PoolError::DuplicateName(n)) if n == "a")
    );
    assert!(matches!(
        p.submit(Job::new("", sim(1.0, 1.0))),
        Err(PoolError::InvalidName(_))
    ));
    assert!(matches!(
        p.submit(Job::new("b c", sim(1.0, 1.0))),
        Err(PoolError::InvalidName(_))
    ));
    assert!(matches!(
        p.submit(Job::new("e", Vec::<String>::new())),
        Err(PoolError::EmptyArgv(_))
    ));
    let err = p
        .submit(Job::new("g", sim(1.0, 1.0)).category("gpu"))
        .unwrap_err();
    assert!(err.to_string().contains("gpu"));
    p.shutdown();
    assert!(matches!(
        p.submit(Job::new("z", sim(1.0, 1.0))),
        Err(PoolError::ShutDown)
    ));
}

#[test]
fn empty_pool_has_nothing_to_run() {
    let mut p = pool(&TopologyMap::flat(1), 1e6);
    assert!(matches!(p.run_loop(), Err(PoolError::NothingToRun)));
}

#[test]
fn invalid_config_is_rejected() {
    for frac in [0.0, 1.5, f64::NAN] {
        let cfg = PoolConfig {
            mem_limit_fraction: frac,
            ..PoolConfig::default()
        };
        assert!(ExecPool::new(cfg, &TopologyMap::flat(1), SimBackend::new(1.0)).is_err());
    }
}

#[test]
fn physcore_slots_bound_concurrency() {
    let topo = TopologyMap::uniform(2, 8, 2);
    let mut p = pool(&topo, 1e6);
    for i in 0..40 {
        p.submit(Job::new(format!("a{i}"), sim(1.0 + (i % 5) as f64, 1.0)))
            .unwrap();
    }
    let s = p.run_loop().unwrap();
    assert_eq!(s.max_running, 16);
    assert_eq!(s.done, 40);
    for req in p.backend().spawned() {
        assert_eq!(req.cpuset.as_ref().unwrap().len(), 2);
    }
}

#[test]
fn timeout_with_one_restart_gives_two_attempts() {
    let mut p = pool(&TopologyMap::flat(1), 1e6);
    let id = p
        .submit(
            Job::new("slow", sim(10.0, 1.0))
                .timeout(Some(Duration::from_secs(1)))
                .restarts_on_timeout(1),
        )
        .unwrap();
    let s = p.run_loop().unwrap();
    assert_eq!(p.attempts(id), 2);
    assert_eq!(p.job_state(id), JobState::TimedOut);
    assert_eq!(s.timed_out, 1);
    assert_eq!(s.restarts, 1);
    let attempts: Vec<u32> = p.records().iter().map(|r| r.attempt).collect();
    assert_eq!(attempts, vec![1, 2]);
    assert!(p
        .records()
        .iter()
        .all(|r| r.exit == ExitStatus::Signal(libc::SIGKILL)));
}

#[test]
fn watchdog_postpones_shortest_running_heavy_worker() {
    let mut p = pool(&TopologyMap::flat(4), 1000.0);
    p.begin_run();
    // All three reach their footprint at t=50: A has run 50 s, B 10 s, C 5 s.
    let a = p
        .submit(Job::new("A", sim_ramp(100.0, 600.0, 50.0)))
        .unwrap();
    while p.backend().now() < Duration::from_secs(40) {
        p.step().unwrap();
    }
    let b = p
        .submit(Job::new("B", sim_ramp(30.0, 500.0, 10.0)))
        .unwrap();
    while p.backend().now() < Duration::from_secs(45) {
        p.step().unwrap();
    }
    let c = p.submit(Job::new("C", sim_ramp(20.0, 100.0, 5.0))).unwrap();
    while p.step().unwrap() {}
    let s = p.finish_run();

    let first_kill = p
        .events()
        .iter()
        .find(|e| e.kind == EventKind::Kill)
        .unwrap();
    assert_eq!(first_kill.job, "B");
    assert!(
        first_kill.detail.contains("heavy=2"),
        "{}",
        first_kill.detail
    );
    assert!(kinds_for(&p, "B").any(|k| k == EventKind::Postpone));
    for id in [a, b, c] {
        assert!(p.job_state(id).is_terminal());
    }
    assert_eq!(s.terminal(), s.submitted);
    assert_eq!(s.submitted, 3);
    assert_eq!(s.watchdog_kills, s.postponements + s.postpone_exhausted);
}

#[test]
fn single_oversized_worker_is_killed_and_cap_shrinks() {
    let mut p = pool(&TopologyMap::flat(2), 1000.0);
    let id = p.submit(Job::new("huge", sim(10.0, 1200.0))).unwrap();
    let s = p.run_loop().unwrap();
    assert_eq!(p.worker_cap(), Some(1));
    assert!(p.events().iter().any(|e| e.kind == EventKind::Shrink));
    // Three postponements, then the fourth kill is terminal.
    assert_eq!(p.attempts(id), 4);
    assert_eq!(p.postponements(id), 3);
    assert_eq!(p.job_state(id), JobState::Failed);
    assert_eq!(s.postpone_exhausted, 1);
    assert_eq!(s.watchdog_kills, 4);
    assert_eq!(s.watchdog_kills, s.postponements + s.postpone_exhausted);
}

#[test]
fn failing_and_unstartable_jobs() {
    let mut p = pool(&TopologyMap::flat(2), 1e6);
    let bad = p.submit(Job::new("bad", sim_exit(1.0, 1))).unwrap();
    let ghost = p
        .submit(Job::new("ghost", vec!["/no/such/binary"]))
        .unwrap();
    let s = p.run_loop().unwrap();
    assert_eq!(p.job_state(bad), JobState::Failed);
    assert_eq!(p.job_state(ghost), JobState::Failed);
    assert_eq!(s.failed, 2);
    let ghost_rec = p.records().iter().find(|r| r.job == "ghost").unwrap();
    assert_eq!(ghost_rec.exit, ExitStatus::NotStarted);
    let snap = p.snapshot_handle().get();
    let failed: Vec<&str> = snap.failed_jobs.iter().map(|j| j.name.as_str()).collect();
    assert_eq!(failed, vec!["bad", "ghost"]);
}

#[test]
fn callback_errors_and_panics_are_contained() {
    let mut p = pool(&TopologyMap::flat(1), 1e6);
    p.submit(Job::new("p", sim(1.0, 1.0)).on_done(|_| panic!("boom")))
        .unwrap();
    p.submit(Job::new("e", sim(1.0, 1.0)).on_start(|_| Err("nope".into())))
        .unwrap();
    let done = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&done);
    p.submit(Job::new("ok", sim(1.0, 1.0)).on_done(move |r| {
        seen.lock().unwrap().push((r.name.clone(), r.state));
        Ok(())
    }))
    .unwrap();
    let s = p.run_loop().unwrap();
    assert_eq!(s.done, 3);
    let errors: Vec<&PoolEvent> = p
        .events()
        .iter()
        .filter(|e| e.kind == EventKind::CallbackError)
        .collect();
    assert_eq!(errors.len(), 2);
    assert!(errors[0].detail.contains("boom"));
    assert!(errors[1].detail.contains("nope"));
    assert_eq!(
        *done.lock().unwrap(),
        vec![("ok".to_string(), JobState::Done)]
    );
}

#[test]
fn global_timeout_terminates_everything() {
    let cfg = PoolConfig {
        global_timeout: Some(Duration::from_secs(5)),
        ..PoolConfig::default()
    };
    let mut p = ExecPool::new(cfg, &TopologyMap::flat(1), SimBackend::new(1e6)).unwrap();
    let quick = p.submit(Job::new("quick", sim(1.0, 1.0))).unwrap();
    let long = p.submit(Job::new("long", sim(100.0, 1.0))).unwrap();
    let queued = p.submit(Job::new("queued", sim(1.0, 1.0))).unwrap();
    let s = p.run_loop().unwrap();
    assert!(s.global_timeout_hit);
    assert_eq!(p.job_state(quick), JobState::Done);
    assert_eq!(p.job_state(long), JobState::TimedOut);
    assert_eq!(p.job_state(queued), JobState::Killed);
    assert_eq!(s.terminal(), 3);
    assert_eq!(p.backend().live_processes(), 0);
}

#[test]
fn interrupt_kills_running_and_drops_queue() {
    let mut p = pool(&TopologyMap::flat(1), 1e6);
    let a = p.submit(Job::new("a", sim(100.0, 1.0))).unwrap();
    let b = p.submit(Job::new("b", sim(1.0, 1.0))).unwrap();
    p.begin_run();
    p.step().unwrap();
    p.interrupt_handle().store(true, Ordering::SeqCst);
    while p.step().unwrap() {}
    let s = p.finish_run();
    assert!(s.interrupted);
    assert_eq!(p.job_state(a), JobState::Killed);
    assert_eq!(p.job_state(b), JobState::Killed);
    assert!(p.is_shut_down());
}

#[test]
fn task_states_and_callbacks() {
    let mut p = pool(&TopologyMap::flat(2), 1e6);
    let fired = Arc::new(Mutex::new(Vec::new()));
    let (f1, f2) = (Arc::clone(&fired), Arc::clone(&fired));
    let root = p
        .add_task(Task::new("root").on_start(move |r| {
            f1.lock().unwrap().push(format!("start {}", r.name));
            Ok(())
        }))
        .unwrap();
    let good = p
        .add_task(Task::new("good").parent(root).on_done(move |r| {
            f2.lock()
                .unwrap()
                .push(format!("done {} {}", r.name, r.state));
            Ok(())
        }))
        .unwrap();
    let bad = p.add_task(Task::new("bad").parent(root)).unwrap();
    p.submit(Job::new("g1", sim(1.0, 1.0)).task(good)).unwrap();
    p.submit(Job::new("g2", sim(2.0, 1.0)).task(good)).unwrap();
    p.submit(Job::new("b1", sim_exit(3.0, 2)).task(bad))
        .unwrap();
    assert_eq!(p.task_state(root), TaskState::Pending);
    p.run_loop().unwrap();
    assert_eq!(p.task_state(good), TaskState::Done);
    assert_eq!(p.task_state(bad), TaskState::Failed);
    assert_eq!(p.task_state(root), TaskState::Failed);
    assert_eq!(*fired.lock().unwrap(), vec!["start root", "done good Done"]);

    let snap = p.snapshot();
    assert!(snap.tasks.is_empty());
    assert_eq!(snap.failures.len(), 1);
    assert_eq!(snap.failures[0].name, "root");
    assert_eq!(snap.failures[0].children.len(), 1);
    assert_eq!(snap.failures[0].children[0].jobs[0].name, "b1");
    assert!(matches!(
        p.add_task(Task::new("x").parent(TaskId(99))),
        Err(PoolError::UnknownTask)
    ));
}

#[test]
fn running_job_task_is_not_done_in_snapshots() {
    let mut p = pool(&TopologyMap::flat(1), 1e6);
    let t = p.add_task(Task::new("t")).unwrap();
    p.submit(Job::new("x", sim(2.0, 1.0)).task(t)).unwrap();
    p.submit(Job::new("y", sim(2.0, 1.0)).task(t)).unwrap();
    p.begin_run();
    while p.step().unwrap() {
        let snap = p.snapshot();
        for j in snap.jobs.iter().filter(|j| j.state == "Running") {
            assert_eq!(j.task.as_deref(), Some("t"));
            assert_eq!(snap.tasks[0].state, "Running");
        }
    }
}

#[test]
fn event_log_file_matches_memory() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.log");
    let mut p = pool(&TopologyMap::flat(1), 1e6)
        .with_event_log(&path)
        .unwrap();
    p.submit(Job::new("a", sim(1.0, 1.0))).unwrap();
    p.run_loop().unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let parsed: Vec<LogLine> = text.lines().map(|l| parse_log_line(l).unwrap()).collect();
    assert_eq!(parsed.len(), p.events().len());
    let kinds: Vec<EventKind> = parsed.iter().map(|l| l.kind).collect();
    assert_eq!(
        kinds,
        vec![EventKind::Submit, EventKind::Start, EventKind::Done]
    );
}

#[test]
fn unwritable_resource_log_aborts_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resources.csv");
    let mut p = pool(&TopologyMap::flat(1), 1e6)
        .with_resource_log(&path)
        .unwrap();
    p.submit(Job::new("a", sim(1.0, 1.0))).unwrap();
    p.submit(Job::new("b", sim(1.0, 1.0))).unwrap();
    std::fs::remove_file(&path).unwrap();
    std::fs::create_dir(&path).unwrap();
    assert!(matches!(p.run_loop(), Err(PoolError::ResourceLog { .. })));
}

fn trace(seed: u64) -> Vec<String> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut p = pool(&TopologyMap::uniform(1, 3, 2), 2000.0);
    for i in 0..12 {
        let run = rng.gen_range(1.0..8.0);
        let rss = rng.gen_range(10.0..900.0);
        let cat = if i % 3 == 0 { "measure" } else { "algorithm" };
        p.submit(Job::new(format!("j{i}"), sim(run, rss)).category(cat))
            .unwrap();
    }
    p.run_loop().unwrap();
    p.events().iter().map(PoolEvent::to_line).collect()
}

#[test]
fn schedule_trace_is_deterministic() {
    assert_eq!(trace(11), trace(11));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn slots_never_shared_and_every_job_terminates(
        jobs in proptest::collection::vec((0.1f64..5.0, 1.0f64..600.0, 0usize..3, 0i32..2), 1..30),
        nodes in 1usize..3,
        cores in 1usize..4,
        threads in 1usize..3,
    ) {
        let topo = TopologyMap::uniform(nodes, cores, threads);
        let mut p = pool(&topo, 1500.0);
        let cats = ["algorithm", "measure", "measure-mt"];
        for (i, (run, rss, cat, exit)) in jobs.iter().enumerate() {
            let mut argv = sim(*run, *rss);
            argv[4] = format!("exit={exit}");
            p.submit(Job::new(format!("j{i}"), argv).category(cats[*cat])).unwrap();
        }
        p.begin_run();
        loop {
            let mut seen = BTreeSet::new();
            for id in &p.running {
                let cpus = p.jobs[id.0].cpuset.as_ref().unwrap();
                for c in cpus.iter() {
                    prop_assert!(seen.insert(c), "cpu {} shared", c);
                }
            }
            for (cat, policy) in &p.cfg.policy_by_category {
                let n = p.running.iter().filter(|id| &p.jobs[id.0].spec.category == cat).count();
                prop_assert!(n <= slots_for(*policy, &topo).len());
            }
            if !p.step().unwrap() {
                break;
            }
        }
        let s = p.finish_run();
        prop_assert_eq!(s.terminal(), jobs.len());
        prop_assert_eq!(s.watchdog_kills, s.postponements + s.postpone_exhausted);
        prop_assert_eq!(p.backend().live_processes(), 0);
        // One record per attempt.
        let attempts: u32 = p.job_ids().map(|id| p.attempts(id)).sum();
        prop_assert_eq!(p.records().len(), attempts as usize);
    }
}
