use lfq::eval::trace::{read_trace, read_trace_csv, trace_to_string, write_trace_csv, TraceRecord};
use lfq::eval::{
    compare, grid, oracle_optimal_cap, pearson, read_compare_csv, read_oracle_csv, read_sweep_csv, run_sweep,
    write_compare_csv, write_oracle_csv, write_sweep_csv, Axis, Contender, OracleWindow, SweepSpec,
};
use lfq::sim::{TraceEvent, TraceRow};
use lfq::trainer::RewardParams;
use lfq::{Cca, FlowConfig, Mlp, NoPolicy, QdiscKind, SimTime};
use proptest::prelude::*;

#[test]
fn pearson_closed_forms() {
    let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
    let line: Vec<f64> = xs.iter().map(|x| 3.0 * x - 7.0).collect();
    let anti: Vec<f64> = xs.iter().map(|x| -0.5 * x + 2.0).collect();
    assert!((pearson(&xs, &line).unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson(&xs, &anti).unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(pearson(&xs, &[4.0; 5]), None);
    // r = 0.5 for (1,1), (2,3), (3,2).
    assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
}

fn small_sweep(qdisc: QdiscKind) -> SweepSpec {
    SweepSpec {
        duration_s: 1.5,
        seed: 9,
        ..SweepSpec::new(Axis::Delay, 4, qdisc)
    }
}

#[test]
fn sweep_is_bit_reproducible_and_worker_independent() {
    let actor = Mlp::lfq(4);
    let dir = tempfile::tempdir().unwrap();
    let spec = small_sweep(QdiscKind::LfqDynamic);
    let mut files = Vec::new();
    for (i, workers) in [1, 1, 3].into_iter().enumerate() {
        let r = run_sweep(&spec, &actor, workers).unwrap();
        assert_eq!(r.rows.len(), spec.points * spec.ccas.len());
        let p = dir.path().join(format!("s{i}.csv"));
        write_sweep_csv(&p, &r).unwrap();
        files.push(std::fs::read(&p).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0], files[2]);
}

#[test]
fn sweep_csv_round_trips() {
    let r = run_sweep(&small_sweep(QdiscKind::Fifo(30)), &NoPolicy, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    write_sweep_csv(&p, &r).unwrap();
    let (rows, aggs) = read_sweep_csv(&p).unwrap();
    assert_eq!(rows, r.rows);
    assert_eq!(aggs, r.aggregates);
    let all = r.aggregate("all").unwrap();
    assert_eq!(all.experiments, 8);
    assert_eq!(
        r.aggregate("newreno").unwrap().experiments + r.aggregate("bic").unwrap().experiments,
        8
    );
}

#[test]
fn compare_table_round_trips_and_fifo_cap_bounds_max_queue() {
    let configs = grid(&[10.0, 20.0], &[10.0, 20.0], &Cca::ALL, 2.0, 0.01);
    let contenders = [
        Contender {
            label: "fq-100".into(),
            qdisc: QdiscKind::Fifo(100),
            policy: &NoPolicy,
        },
        Contender {
            label: "fq-1000".into(),
            qdisc: QdiscKind::Fifo(1000),
            policy: &NoPolicy,
        },
        Contender {
            label: "fq-codel".into(),
            qdisc: QdiscKind::FqCodel,
            policy: &NoPolicy,
        },
    ];
    let rows = compare(&contenders, &configs, 2).unwrap();
    assert_eq!(rows[0].max_queue, 100);
    assert!(rows[1].avg_queue > rows[0].avg_queue);
    assert!(rows[2].avg_max_queue > 3.0 * rows[2].avg_queue);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.csv");
    write_compare_csv(&p, &rows).unwrap();
    assert_eq!(read_compare_csv(&p).unwrap(), rows);
}

#[test]
fn oracle_curve_round_trips_and_single_cap_is_returned() {
    let c = FlowConfig::new(15.0, 15.0, 2.0, Cca::NewReno, 2);
    let params = RewardParams { alpha: 0.01 };
    let one = oracle_optimal_cap(&c, params, 7..=7, OracleWindow::SecondHalf, 1).unwrap();
    assert_eq!(one.best_cap, 7);
    assert_eq!(one.curve.len(), 1);

    let r = oracle_optimal_cap(&c, params, 1..=30, OracleWindow::WholeFlow, 2).unwrap();
    let best = r.curve.iter().map(|p| p.reward).fold(f64::MIN, f64::max);
    assert_eq!(r.best_reward, best);
    let first_best = r.curve.iter().find(|p| p.reward == best).unwrap();
    assert_eq!(r.best_cap, first_best.cap);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("o.csv");
    write_oracle_csv(&p, &r).unwrap();
    assert_eq!(read_oracle_csv(&p).unwrap(), r.curve);
}

fn event() -> impl Strategy<Value = TraceEvent> {
    prop_oneof![
        Just(TraceEvent::Enqueue),
        Just(TraceEvent::Dequeue),
        Just(TraceEvent::Drop),
        Just(TraceEvent::CapChange),
        Just(TraceEvent::Inference),
    ]
}

fn row() -> impl Strategy<Value = TraceRow> {
    (
        0u64..100_000_000,
        event(),
        0usize..5000,
        prop::option::of(1u32..1000),
        1.0..5000.0f64,
        any::<u64>(),
    )
        .prop_map(|(t, event, queue_len, cap, cwnd, delivered_bytes)| TraceRow {
            time: SimTime::from_micros(t),
            event,
            queue_len,
            cap,
            cwnd,
            delivered_bytes,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trace_csv_round_trips(rows in prop::collection::vec(row(), 0..50)) {
        let text = trace_to_string(&rows).unwrap();
        let back = read_trace(text.as_bytes()).unwrap();
        let direct: Vec<TraceRecord> = rows.iter().map(TraceRecord::from).collect();
        prop_assert_eq!(&back, &direct);
        for (b, r) in back.iter().zip(&rows) {
            prop_assert_eq!(b.time(), r.time);
        }
    }
}

#[test]
fn trace_file_round_trips() {
    let c = FlowConfig::new(6.0, 15.0, 1.0, Cca::Bic, 5);
    let opts = lfq::SimOptions {
        trace: true,
        ..Default::default()
    };
    let run = lfq::eval::run_flow(&c, QdiscKind::FqCodel, &NoPolicy, opts).unwrap();
    let rows = run.trace.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    write_trace_csv(&p, &rows).unwrap();
    let back = read_trace_csv(&p).unwrap();
    assert_eq!(back.len(), rows.len());
    assert!(back.iter().zip(&rows).all(|(b, r)| *b == TraceRecord::from(r)));
}
