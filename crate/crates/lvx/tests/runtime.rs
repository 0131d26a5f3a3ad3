use std::time::{Duration, Instant};

use lvx::runtime::{spawn_cluster, ClusterOptions, Transport};
use lvx::Error;
use lvx_core::comm::{ring_shift, Communicator, Message};
use lvx_core::{DType, Tensor};

fn scalar_msg(v: f64, len: usize) -> Message {
    Message::new(vec![Tensor::full(DType::F32, &[len], v).unwrap()])
}

fn first(m: &Message) -> f64 {
    m.tensors[0].to_f64_vec()[0]
}

fn opts(timeout_ms: u64) -> ClusterOptions {
    ClusterOptions { transport: Transport::Instant, timeout: Duration::from_millis(timeout_ms) }
}

#[test]
fn ping_pong_counts_payload_bytes() {
    let out = spawn_cluster(2, &opts(5_000), |c| {
        if c.rank() == 0 {
            c.send(1, 7, scalar_msg(1.0, 3))?;
            Ok(first(&c.recv(1, 8)?))
        } else {
            let m = c.recv(0, 7)?;
            c.send(0, 8, scalar_msg(first(&m) + 1.0, 3))?;
            Ok(0.0)
        }
    })
    .unwrap();
    assert_eq!(out.results[0], 2.0);
    assert_eq!(out.stats.link(0, 1).bytes_sent, 12);
    assert_eq!(out.stats.link(1, 0).bytes_sent, 12);
    assert_eq!(out.stats.total_bytes(), 24);
    assert_eq!(out.stats.total_messages(), 2);
}

#[test]
fn loopback_is_free() {
    let out = spawn_cluster(1, &opts(1_000), |c| {
        c.send(0, 1, scalar_msg(5.0, 100))?;
        Ok(first(&c.recv(0, 1)?))
    })
    .unwrap();
    assert_eq!(out.results[0], 5.0);
    assert_eq!(out.stats.total_bytes(), 0);
}

#[test]
fn throttled_delivery_waits_for_the_link() {
    // 4000 bytes at 1 MB/s plus 1 ms latency: 5 ms per message, two in a row.
    let o = ClusterOptions {
        transport: Transport::Throttled { bandwidth: 1e6, latency: 1e-3 },
        timeout: Duration::from_secs(5),
    };
    let out = spawn_cluster(2, &o, |c| {
        if c.rank() == 0 {
            c.send(1, 0, scalar_msg(1.0, 1000))?;
            c.send(1, 0, scalar_msg(2.0, 1000))?;
            Ok(Duration::ZERO)
        } else {
            let t = Instant::now();
            c.recv(0, 0)?;
            c.recv(0, 0)?;
            Ok(t.elapsed())
        }
    })
    .unwrap();
    assert!(out.results[1] >= Duration::from_micros(9_500), "{:?}", out.results[1]);
    let link = out.stats.link(0, 1);
    assert!((link.modeled_time_seconds - 0.010).abs() < 1e-12);
}

#[test]
fn fifo_within_a_tag() {
    let out = spawn_cluster(2, &opts(5_000), |c| {
        if c.rank() == 0 {
            for i in 0..20 {
                c.send(1, (i % 2) as u64, scalar_msg(i as f64, 1))?;
            }
            Ok(vec![])
        } else {
            // drain tag 1 first; tag 0 must still arrive in send order
            let mut got = Vec::new();
            for _ in 0..10 {
                got.push(first(&c.recv(0, 1)?));
            }
            for _ in 0..10 {
                got.push(first(&c.recv(0, 0)?));
            }
            Ok(got)
        }
    })
    .unwrap();
    let expected: Vec<f64> = (0..20).filter(|i| i % 2 == 1).chain((0..20).filter(|i| i % 2 == 0)).map(f64::from).collect();
    assert_eq!(out.results[1], expected);
}

#[test]
fn ring_shift_receives_from_predecessor() {
    let out = spawn_cluster(3, &opts(5_000), |c| {
        let m = ring_shift(c, scalar_msg(c.rank() as f64 + 10.0, 1))?;
        Ok(first(&m))
    })
    .unwrap();
    assert_eq!(out.results, vec![12.0, 10.0, 11.0]);
}

#[test]
fn missing_message_times_out() {
    let started = Instant::now();
    let r = spawn_cluster(2, &opts(100), |c| {
        if c.rank() == 1 {
            c.recv(0, 3)?;
        }
        Ok(())
    });
    assert!(matches!(r, Err(Error::Core(lvx_core::Error::Timeout { src: 0, tag: 3 }))), "{:?}", r.err());
    assert!(started.elapsed() < Duration::from_secs(5));
}

#[test]
fn worker_error_releases_blocked_peers() {
    let started = Instant::now();
    let r = spawn_cluster(3, &opts(20_000), |c| {
        if c.rank() == 2 {
            return Err(lvx_core::Error::InvalidConfig("worker 2 gave up".into()));
        }
        c.recv(2, 0)?;
        Ok(())
    });
    assert!(matches!(r, Err(Error::Core(lvx_core::Error::InvalidConfig(_)))), "{:?}", r.err());
    assert!(started.elapsed() < Duration::from_secs(10));
}

#[test]
fn panic_is_reported_with_rank() {
    let r = spawn_cluster(2, &opts(20_000), |c| {
        if c.rank() == 1 {
            panic!("boom");
        }
        c.recv(1, 0)?;
        Ok(())
    });
    match r {
        Err(Error::WorkerPanic { rank, message }) => {
            assert_eq!(rank, 1);
            assert!(message.contains("boom"));
        }
        other => panic!("unexpected {:?}", other.err()),
    }
}

#[test]
fn bad_transport_rejected() {
    let o = ClusterOptions { transport: Transport::Throttled { bandwidth: -1.0, latency: 0.0 }, timeout: Duration::from_secs(1) };
    assert!(spawn_cluster(2, &o, |_| Ok(())).is_err());
}
