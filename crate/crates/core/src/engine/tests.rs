use std::any::Any;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::*;
use crate::chunk::{ParamWriter, TensorMetaData};
use crate::dtype::ScalarType;
use crate::operators::{from_array, separable_conv, BINOMIAL};

type Body = dyn Fn(TaskContext, Vec<Vec<u64>>) -> TaskFuture + Send + Sync;

struct FnOp(Box<Body>);

impl crate::graph::Operator for FnOp {
    fn compute(self: Arc<Self>, ctx: TaskContext, positions: Vec<Vec<u64>>) -> TaskFuture {
        (self.0)(ctx, positions)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

fn fn_node(
    name: &str,
    md: TensorMetaData,
    inputs: Vec<Node>,
    body: impl Fn(TaskContext, Vec<Vec<u64>>) -> TaskFuture + Send + Sync + 'static,
) -> Node {
    Node::new(name, ParamWriter::new().finish(), md, None, inputs, Arc::new(FnOp(Box::new(body))))
}

fn md(size: &[u64], chunk: &[u64]) -> TensorMetaData {
    TensorMetaData::new(size.to_vec(), chunk.to_vec(), ScalarType::F32.into()).unwrap()
}

fn ramp(md: &TensorMetaData) -> Node {
    let n = md.num_elements() as usize;
    let mut bytes = vec![0u8; n * 4];
    for i in 0..n {
        ScalarType::F32.write(&mut bytes, i, (i % 97) as f64 - 40.0);
    }
    from_array(bytes, md.clone(), None).unwrap()
}

fn config() -> EngineConfig {
    EngineConfig {
        worker_pool_size: 2,
        ..EngineConfig::default()
    }
}

/// Publishes zero-filled chunks after running `job` per chunk.
fn filler(name: &str, md: TensorMetaData, job: impl Fn() -> Result<()> + Send + Sync + Clone + 'static) -> Node {
    fn_node(name, md, Vec::new(), move |ctx, positions| {
        let job = job.clone();
        Box::pin(async move {
            for p in positions {
                let a = ctx.alloc_chunk().await?;
                let j = job.clone();
                let a = ctx.run_job(move || j().map(|_| a)).await?;
                ctx.publish(&p, a, DataState::Final)?;
            }
            Ok(())
        })
    })
}

#[test]
fn resolving_one_chunk_of_a_chain_computes_one_source_chunk() {
    let src = ramp(&md(&[40, 40], &[4, 4]));
    let out = src.add_scalar(1.0).unwrap().mul_scalar(3.0).unwrap().abs().unwrap();
    for fusion in [true, false] {
        let rt = Runtime::new(EngineConfig { fusion, ..config() }).unwrap();
        rt.resolve(&out, &[vec![3, 5]]).unwrap();
        let s = rt.stats();
        assert_eq!(s.published(&src), 1);
        assert_eq!(s.spawned(&src), 1);
    }
}

#[test]
fn second_resolve_is_a_cache_hit() {
    let src = ramp(&md(&[16, 16], &[4, 4]));
    let out = src.mul_scalar(2.0).unwrap();
    let rt = Runtime::new(config()).unwrap();
    let a = rt.resolve(&out, &[vec![1, 1], vec![2, 3]]).unwrap();
    let a: Vec<Vec<u8>> = a.iter().map(|c| c.bytes().to_vec()).collect();
    rt.reset_stats();
    let b = rt.resolve(&out, &[vec![1, 1], vec![2, 3]]).unwrap();
    assert!(rt.stats().tasks_spawned.values().all(|v| *v == 0));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.as_slice(), y.bytes());
    }
}

#[test]
fn requesting_a_non_input_is_a_discipline_error() {
    let m = md(&[4], &[4]);
    let other = ramp(&m);
    let o2 = other.clone();
    let bad = fn_node("bad", m, Vec::new(), move |ctx, _| {
        let o = o2.clone();
        Box::pin(async move {
            ctx.request_chunk(&o, vec![0]).await?;
            Ok(())
        })
    });
    let rt = Runtime::new(config()).unwrap();
    let err = rt.resolve(&bad, &[vec![0]]).unwrap_err();
    assert!(matches!(err, Error::GraphDiscipline(_)), "{err}");
    assert!(err.to_string().contains("`bad`"));
}

#[test]
fn compatible_barriers_are_served_by_one_action() {
    let m = md(&[3], &[1]);
    let node = fn_node("barrier", m, Vec::new(), |ctx, positions| {
        Box::pin(async move {
            ctx.barrier(Location::Device(0)).await;
            for p in positions {
                let a = ctx.alloc_chunk().await?;
                ctx.publish(&p, a, DataState::Final)?;
            }
            Ok(())
        })
    });
    let rt = Runtime::new(EngineConfig {
        max_requests_per_task: 1,
        ..config()
    })
    .unwrap();
    rt.resolve(&node, &[vec![0], vec![1], vec![2]]).unwrap();
    let s = rt.stats();
    assert_eq!(s.spawned(&node), 3);
    assert_eq!(s.barrier_actions, 1);
}

#[test]
fn admission_defers_batches_beyond_the_limit() {
    let m = md(&[5], &[1]);
    let node = filler("slow", m, || {
        std::thread::sleep(Duration::from_millis(5));
        Ok(())
    });
    let rt = Runtime::new(EngineConfig {
        max_requests_per_task: 1,
        max_active_tasks_per_operator: 4,
        ..config()
    })
    .unwrap();
    let positions: Vec<Vec<u64>> = (0..5).map(|i| vec![i]).collect();
    rt.resolve(&node, &positions).unwrap();
    let s = rt.stats();
    assert_eq!(s.spawned(&node), 5);
    assert_eq!(s.max_active_tasks[&node.id()], 4);
    assert!(s.deferred_batches >= 1);
}

#[test]
fn limit_one_degenerates_to_sequential_evaluation() {
    let m = md(&[6], &[1]);
    let node = filler("seq", m, || Ok(()));
    let rt = Runtime::new(EngineConfig {
        max_requests_per_task: 1,
        max_active_tasks_per_operator: 1,
        ..config()
    })
    .unwrap();
    let positions: Vec<Vec<u64>> = (0..6).map(|i| vec![i]).collect();
    rt.resolve(&node, &positions).unwrap();
    assert_eq!(rt.stats().max_active_tasks[&node.id()], 1);
}

#[test]
fn failing_jobs_name_the_node() {
    let m = md(&[2], &[1]);
    let failing = filler("failing", m.clone(), || Err(Error::Job("disk on fire".into())));
    let rt = Runtime::new(config()).unwrap();
    let err = rt.resolve(&failing, &[vec![0]]).unwrap_err();
    match &err {
        Error::Operator { name, id, message } => {
            assert_eq!(name, "failing");
            assert_eq!(*id, failing.id());
            assert!(message.contains("disk on fire"));
        }
        e => panic!("unexpected {e}"),
    }
    let panicking = filler("panicking", m, || panic!("boom"));
    let err = rt.resolve(&panicking, &[vec![1]]).unwrap_err();
    assert!(err.to_string().contains("panicking") && err.to_string().contains("boom"), "{err}");
    // the runtime stays usable after a failure
    let ok = ramp(&md(&[4], &[2]));
    rt.resolve(&ok, &[vec![1]]).unwrap();
}

#[test]
fn manager_stays_responsive_during_blocking_jobs() {
    let m = md(&[1], &[1]);
    let done = Arc::new(AtomicBool::new(false));
    let d = done.clone();
    let slow = filler("slow", m, move || {
        std::thread::sleep(Duration::from_millis(400));
        d.store(true, Ordering::SeqCst);
        Ok(())
    });
    let fast_md = md(&[20], &[1]);
    let fast = filler("fast", fast_md.clone(), || Ok(()));
    let finished_early = Arc::new(AtomicUsize::new(0));
    let (s2, f2, fe, d2) = (slow.clone(), fast.clone(), finished_early.clone(), done.clone());
    let both = fn_node("both", md(&[1], &[1]), vec![slow.clone(), fast.clone()], move |ctx, positions| {
        let (s, f, fe, d) = (s2.clone(), f2.clone(), fe.clone(), d2.clone());
        Box::pin(async move {
            let slow = ctx.request_chunks(&s, vec![vec![0]]);
            let fast: Vec<Vec<u64>> = (0..20).map(|i| vec![i]).collect();
            ctx.request_chunks(&f, fast).await?;
            if !d.load(Ordering::SeqCst) {
                fe.fetch_add(1, Ordering::SeqCst);
            }
            slow.await?;
            let a = ctx.alloc_chunk().await?;
            ctx.publish(&positions[0], a, DataState::Final)
        })
    });
    let rt = Runtime::new(EngineConfig {
        max_requests_per_task: 1,
        worker_pool_size: 2,
        ..EngineConfig::default()
    })
    .unwrap();
    rt.resolve(&both, &[vec![0]]).unwrap();
    assert_eq!(finished_early.load(Ordering::SeqCst), 1);
    assert!(rt.stats().manager_iterations > 20);
}

#[test]
fn exhausted_memory_is_diagnosed() {
    let src = ramp(&md(&[64], &[8]));
    let s2 = src.clone();
    let greedy = fn_node("greedy", md(&[1], &[1]), vec![src.clone()], move |ctx, positions| {
        let s = s2.clone();
        Box::pin(async move {
            let all: Vec<Vec<u64>> = (0..8).map(|i| vec![i]).collect();
            ctx.request_chunks(&s, all).await?;
            let a = ctx.alloc_chunk().await?;
            ctx.publish(&positions[0], a, DataState::Final)
        })
    });
    let rt = Runtime::new(config().with_ram_capacity(4 * 32)).unwrap();
    let err = rt.resolve(&greedy, &[vec![0]]).unwrap_err();
    assert!(matches!(err, Error::MemoryExhausted(_)), "{err}");
    assert!(err.to_string().contains("array"), "{err}");
    let (used, high, cap) = rt.store_usage(Location::Ram).unwrap();
    assert!(high <= cap && used <= cap);
}

#[test]
fn thrashing_is_diagnosed() {
    let mut n = ramp(&md(&[24, 24], &[4, 4]));
    for _ in 0..6 {
        n = separable_conv(&n, &[BINOMIAL.to_vec(), BINOMIAL.to_vec()]).unwrap();
    }
    // room for one task's inputs but far below the stages' working set
    let rt = Runtime::new(config().with_ram_capacity(54 * 64)).unwrap();
    let err = rt.for_each_chunk(&n, |_, _| Ok(())).unwrap_err();
    assert!(err.to_string().contains("thrashes"), "{err}");
    let rt = Runtime::new(EngineConfig {
        max_recomputations: 0,
        ..config().with_ram_capacity(4 * 36 * 64)
    })
    .unwrap();
    rt.for_each_chunk(&n, |_, _| Ok(())).unwrap();
}

#[test]
fn results_do_not_depend_on_limits() {
    let src = ramp(&md(&[12, 12], &[4, 4]));
    let conv = separable_conv(&src, &[BINOMIAL.to_vec(), BINOMIAL.to_vec()]).unwrap();
    let out = conv.mul_scalar(0.5).unwrap().cast(ScalarType::I16).unwrap();
    let mut first: Option<Vec<u8>> = None;
    for (active, per_task) in [(1, 1), (4, 32), (16, 2)] {
        let rt = Runtime::new(EngineConfig {
            max_active_tasks_per_operator: active,
            max_requests_per_task: per_task,
            ..config()
        })
        .unwrap();
        let dense = rt.resolve_dense(&out).unwrap();
        match &first {
            None => first = Some(dense),
            Some(f) => assert_eq!(f, &dense),
        }
    }
}

#[test]
fn device_requests_transfer_instead_of_recomputing() {
    let src = ramp(&md(&[8], &[4]));
    let out = src.add_scalar(1.0).unwrap();
    let rt = Runtime::new(config()).unwrap();
    let on_device = rt
        .resolve_at(&out, &[vec![1]], Location::Device(0), DataState::Final)
        .unwrap();
    assert_eq!(on_device[0].location(), Location::Device(0));
    rt.reset_stats();
    let in_ram = rt.resolve(&out, &[vec![1]]).unwrap();
    let s = rt.stats();
    assert_eq!(s.transfers, 1);
    assert!(s.tasks_spawned.values().all(|v| *v == 0));
    assert_eq!(on_device[0].bytes(), in_ram[0].bytes());
}

#[test]
fn disk_cache_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.plcs");
    let src = ramp(&md(&[8, 8], &[4, 4]));
    let out = src.mul_scalar(3.0).unwrap().cache_on_disk();
    let cfg = EngineConfig {
        disk: Some((path.clone(), StoreConfig::with_capacity(1 << 20))),
        ..config()
    };
    let first = {
        let rt = Runtime::new(cfg.clone()).unwrap();
        rt.resolve_dense(&out).unwrap()
    };
    let rt = Runtime::new(cfg).unwrap();
    let second = rt.resolve_dense(&out).unwrap();
    assert_eq!(first, second);
    let s = rt.stats();
    assert!(s.tasks_spawned.values().all(|v| *v == 0));
    assert_eq!(s.transfers, 4);
    assert_eq!(s.bytes_read, 4 * 16 * 4);
}

#[test]
fn in_place_and_out_of_place_agree() {
    let src = ramp(&md(&[10, 10], &[4, 4]));
    let out = src.sub(&src).unwrap().abs().unwrap().add_scalar(2.0).unwrap();
    let single = src.neg().unwrap();
    for node in [out, single] {
        let rt = Runtime::new(EngineConfig { inplace: true, ..config() }).unwrap();
        let a = rt.resolve_dense(&node).unwrap();
        assert_eq!(rt.stats().inplace_grants, 9);
        let b = Runtime::new(EngineConfig { inplace: false, ..config() })
            .unwrap()
            .resolve_dense(&node)
            .unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn chunks_outside_the_grid_are_rejected() {
    let src = ramp(&md(&[8], &[4]));
    let rt = Runtime::new(config()).unwrap();
    assert!(matches!(
        rt.resolve(&src, &[vec![2]]),
        Err(Error::InvalidCoordinate(_))
    ));
}

#[test]
fn worker_pool_runs_jobs_in_parallel() {
    let spin = || {
        let mut x = 1.0f64;
        for i in 0..4_000_000 {
            x = (x * 1.000_000_1 + i as f64).sqrt();
        }
        std::hint::black_box(x);
        Ok(())
    };
    let time = |workers| {
        let rt = Runtime::new(EngineConfig {
            worker_pool_size: workers,
            max_requests_per_task: 1,
            max_active_tasks_per_operator: 8,
            ..EngineConfig::default()
        })
        .unwrap();
        let node = filler("spin", md(&[8, 4], &[1, 4]), spin);
        let start = std::time::Instant::now();
        let out = rt.resolve_dense(&node).unwrap();
        (start.elapsed().as_secs_f64(), out)
    };
    let (serial, a) = time(1);
    let (parallel, b) = time(8);
    assert_eq!(a, b);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    if cores >= 8 {
        assert!(serial / parallel >= 4.0, "speedup {:.2} on {cores} cores", serial / parallel);
    } else {
        assert!(parallel < serial * 2.0, "8 workers took {parallel:.3} s against {serial:.3} s");
    }
}
