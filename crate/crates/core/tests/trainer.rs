use lfq::eval::{grid, run_many};
use lfq::mlp::{WeightsMeta, LFQ_ARCH};
use lfq::trainer::{
    actor_path, critic_path, draw_flow_configs, read_log, run_offline_batch, run_online_batch, FlowRanges, Mode,
    Trainer, TrainerConfig,
};
use lfq::{Cca, Error, Mlp, QdiscKind, SimOptions};
use rand::SeedableRng;
use rand_pcg::Pcg64;

fn configs(n: usize, seed: u64) -> Vec<lfq::FlowConfig> {
    let mut rng = Pcg64::seed_from_u64(seed);
    draw_flow_configs(n, &mut rng, &FlowRanges::default(), 0.01, 10)
}

#[test]
fn offline_spends_two_simulations_per_flow_and_online_one() {
    let cs = configs(6, 1);
    let mut actor = Mlp::lfq(1);
    let (stats, results) = run_offline_batch(&cs, &mut actor, SimOptions::default(), None, 0).unwrap();
    assert_eq!(stats.simulations, 12);
    assert!(results.iter().all(|r| r.simulations == 2));

    let mut critic = Mlp::lfq(2);
    let (stats, results) = run_online_batch(&cs, &mut actor, &mut critic, SimOptions::default(), None, 0).unwrap();
    assert_eq!(stats.simulations, 6);
    assert!(results.iter().all(|r| r.simulations == 1));
    assert!(stats.critic_loss.is_some());
}

#[test]
fn offline_targets_are_the_better_neighbour() {
    let cs = configs(10, 2);
    let mut actor = Mlp::lfq(3);
    let (_, results) = run_offline_batch(&cs, &mut actor, SimOptions::default(), None, 0).unwrap();
    for r in &results {
        let (plus, minus) = (r.plus, r.minus);
        assert_eq!(plus.0, r.record.base_cap + 1);
        assert_eq!(minus.0, r.record.base_cap.saturating_sub(1).max(1));
        let expected = if plus.1.reward > minus.1.reward {
            plus.0
        } else {
            minus.0
        };
        assert_eq!(r.target, expected as f64);
    }
}

#[test]
fn training_is_deterministic_and_independent_of_worker_count() {
    let train = |workers: usize| {
        let mut c = TrainerConfig::new(Mode::Online, 10.0, 100, 42);
        c.workers = workers;
        let mut t = Trainer::new(c).unwrap();
        t.run(None, |_| {}).unwrap();
        (t.actor.to_bytes(), t.critic.unwrap().to_bytes(), t.log)
    };
    let a = train(1);
    assert_eq!(a, train(1));
    assert_eq!(a, train(3));
}

#[test]
fn run_writes_weights_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = TrainerConfig::new(Mode::Online, 10.0, 90, 7);
    c.checkpoint_every = Some(1);
    let mut t = Trainer::new(c).unwrap();
    t.run(Some(dir.path()), |_| {}).unwrap();

    let log = read_log(&dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.len(), 3);
    assert_eq!(log, t.log);
    assert_eq!(log.last().unwrap().flows_seen, 90);
    assert_eq!(log[2].simulations, 10);

    let actor = Mlp::load_expecting(actor_path(dir.path()), &LFQ_ARCH).unwrap();
    assert_eq!(actor, t.actor);
    let critic = Mlp::load_expecting(critic_path(dir.path()), &LFQ_ARCH).unwrap();
    assert_eq!(Some(critic), t.critic);
    let meta = WeightsMeta::read_for(&actor_path(dir.path())).unwrap();
    assert_eq!(
        (meta.role.as_str(), meta.mode.as_str(), meta.flows),
        ("actor", "online", 90)
    );

    for b in 1..=3 {
        assert!(dir.path().join(format!("checkpoints/actor-{b:06}.lfqw")).exists());
        assert!(dir.path().join(format!("checkpoints/critic-{b:06}.lfqw")).exists());
    }
}

#[test]
fn zero_flows_is_nothing_to_train() {
    let err = Trainer::new(TrainerConfig::new(Mode::Offline, 0.01, 0, 1))
        .err()
        .unwrap();
    assert!(matches!(err, Error::NothingToTrain));
    assert_eq!(err.to_string(), "nothing to train");
}

#[test]
fn continued_training_rejects_foreign_architectures() {
    let t = Trainer::new(TrainerConfig::new(Mode::Offline, 0.01, 20, 1)).unwrap();
    let err = t.with_weights(Mlp::new(&[60, 8, 1], 1), None).err().unwrap();
    assert!(matches!(err, Error::Dimension { .. }));
}

fn mean_cap(actor: &Mlp) -> f64 {
    let cs = grid(&[5.0, 15.0, 25.0], &[5.0, 15.0, 25.0], &Cca::ALL, 5.0, 0.0);
    let runs = run_many(&cs, QdiscKind::LfqDynamic, actor, SimOptions::default(), 1).unwrap();
    runs.iter().map(|r| r.settled_cap().unwrap()).sum::<f64>() / runs.len() as f64
}

#[test]
fn early_training_rises_from_zero_and_large_alpha_buys_smaller_caps() {
    let train = |alpha: f64| {
        let mut t = Trainer::new(TrainerConfig::new(Mode::Offline, alpha, 2000, 3)).unwrap();
        t.run(None, |_| {}).unwrap();
        t
    };
    let small = train(0.01);
    let first = small.log[0].mean_actor_output;
    let peak = small.log.iter().map(|b| b.mean_actor_output).fold(0.0, f64::max);
    assert!(first < 2.0, "first batch mean {first}");
    assert!(peak > first + 2.0, "peak batch mean {peak}");

    let large = train(10.0);
    let (cap_small, cap_large) = (mean_cap(&small.actor), mean_cap(&large.actor));
    assert!(
        cap_large < cap_small,
        "alpha 10 cap {cap_large} vs alpha 0.01 cap {cap_small}"
    );
}
