use lmvae_core::metrics::Delta;
use lmvae_core::train::{Checkpoint, Model, RunConfig, Trainer};
use lmvae_core::{Error, Tensor};

fn config(mode: &str, capacity: &str, tasks: &[(&str, u64)]) -> RunConfig {
    let mut text = format!(
        r#"
name = "trainer-test"
mode = "{mode}"
seed = 17
[capacity]
{capacity}
[model]
latent = 3
hidden = [16]
[training]
epochs = 3
batch_size = 32
learning_rate = 5e-2
eval_samples = 64
"#
    );
    for (generator, seed) in tasks {
        text.push_str(&format!(
            "[[tasks]]\nsource = \"synth\"\ngenerator = \"{generator}\"\nseed = {seed}\ntrain = 128\ntest = 64\n"
        ));
        if mode == "semi-supervised" {
            text.push_str("labeled = 16\n");
        }
    }
    RunConfig::from_toml(&text).unwrap()
}

fn trainer(cfg: RunConfig) -> Trainer {
    let tasks = cfg.resolve_tasks().unwrap();
    Trainer::new(cfg, tasks).unwrap()
}

const TWO: &[(&str, u64)] = &[("gaussian-blobs(4)", 1), ("stripes", 2)];
const FIXED2: &str = "kind = \"fixed\"\nexperts = 2";

#[test]
fn single_expert_mixture_trains_like_a_plain_vae() {
    let one = &TWO[..1];
    let mut mix = trainer(config("unsupervised", "kind = \"fixed\"\nexperts = 1", one));
    let mut plain = trainer(config("unsupervised", "kind = \"transfer\"", one));
    mix.run().unwrap();
    plain.run().unwrap();
    assert_eq!(mix.state().step, plain.state().step);
    assert_eq!(
        mix.experts().unwrap()[0].params().len(),
        plain.experts().unwrap()[0].params().len()
    );
    let values = |t: &Trainer| -> Vec<Vec<f64>> {
        t.experts().unwrap()[0]
            .params()
            .into_iter()
            .map(|id| t.store().value(id).data().to_vec())
            .collect()
    };
    assert_eq!(values(&mix), values(&plain));
    let mse = |t: &Trainer| {
        t.curves()
            .iter()
            .find(|c| c.delta == Delta::Mse)
            .unwrap()
            .scores()
            .to_vec()
    };
    assert_eq!(mse(&mix), mse(&plain));
    assert_eq!(mix.reports(), plain.reports());
}

#[test]
fn resumed_run_is_bit_identical() {
    for (mode, capacity) in [
        ("unsupervised", FIXED2),
        ("supervised", FIXED2),
        ("semi-supervised", FIXED2),
        ("unsupervised", "kind = \"expansion\"\nthreshold = 2.0"),
    ] {
        let cfg = config(mode, capacity, TWO);
        let mut full = trainer(cfg.clone());
        full.run().unwrap();

        let mut first = trainer(cfg.clone());
        first.run_task().unwrap();
        let saved = Checkpoint::capture(&first).to_bytes();
        drop(first);
        let mut resumed = Checkpoint::from_bytes(&saved)
            .unwrap()
            .into_trainer(cfg.resolve_tasks().unwrap())
            .unwrap();
        resumed.run().unwrap();

        assert_eq!(
            full.log().to_csv(),
            resumed.log().to_csv(),
            "{mode} {capacity}"
        );
        assert_eq!(
            Checkpoint::capture(&full).to_bytes(),
            Checkpoint::capture(&resumed).to_bytes(),
            "{mode} {capacity}"
        );
    }
}

#[test]
fn repeated_runs_are_identical_and_seeds_matter() {
    let run = |seed: u64| {
        let mut cfg = config("supervised", FIXED2, TWO);
        cfg.seed = seed;
        let mut t = trainer(cfg);
        t.run().unwrap();
        (t.log().to_csv(), Checkpoint::capture(&t).to_bytes())
    };
    let a = run(4);
    assert_eq!(a, run(4));
    assert_ne!(a.1, run(5).1);
}

#[test]
fn every_task_switch_logs_one_report() {
    let three = &[("gaussian-blobs(4)", 1), ("stripes", 2), ("checkers", 3)];
    for (capacity, kind) in [
        ("kind = \"fixed\"\nexperts = 3", "selection"),
        ("kind = \"expansion\"\nthreshold = 2.0", "novelty"),
    ] {
        let mut t = trainer(config("unsupervised", capacity, three));
        t.run().unwrap();
        for task in 0..3 {
            let n = t
                .log()
                .events()
                .iter()
                .filter(|e| (e.kind == "selection" || e.kind == "novelty") && e.task == Some(task))
                .count();
            assert_eq!(n, 1, "{kind} task {task}");
        }
        assert_eq!(t.log().of_kind(kind).count(), 3);
    }
}

#[test]
fn too_few_experts_aborts_with_capacity_error() {
    let mut t = trainer(config("unsupervised", "kind = \"fixed\"\nexperts = 1", TWO));
    t.run_task().unwrap();
    match t.run_task() {
        Err(Error::CapacityExhausted { experts: 1 }) => {}
        other => panic!("expected capacity error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn frozen_experts_pass_the_audit_and_tampering_is_caught() {
    let mut t = trainer(config("supervised", FIXED2, TWO));
    t.run().unwrap();
    t.audit().unwrap();
    assert_eq!(t.state().freezes.len(), 2);

    let mut ckpt = Checkpoint::capture(&t);
    let victim = t.experts().unwrap()[t.state().task_expert[0]].params()[0];
    let mut v = ckpt.params.value(victim).clone();
    let mut data = v.data().to_vec();
    data[0] += 1e-9;
    v = Tensor::new(v.shape().to_vec(), data).unwrap();
    ckpt.params.set_frozen(victim, false);
    ckpt.params.set_value(victim, v).unwrap();
    ckpt.params.set_frozen(victim, true);
    let tasks = ckpt.config.resolve_tasks().unwrap();
    match ckpt.into_trainer(tasks) {
        Err(Error::FreezeViolation { .. }) => {}
        other => panic!("expected freeze violation, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn learned_task_is_untouched_by_the_next_one() {
    let mut t = trainer(config("unsupervised", FIXED2, TWO));
    let before = t.run_task().unwrap().task(0).unwrap().clone();
    let after = t.run_task().unwrap().task(0).unwrap().clone();
    // Evaluation noise differs per report, so NLL agrees only up to MC noise.
    assert!(
        (before.nll - after.nll).abs() <= 0.05 * before.nll.abs(),
        "{} vs {}",
        before.nll,
        after.nll
    );
}

#[test]
fn expansion_freezes_shared_layers_after_the_first_task() {
    let mut t = trainer(config(
        "unsupervised",
        "kind = \"expansion\"\nthreshold = 0.0",
        TWO,
    ));
    t.run_task().unwrap();
    let shared = t
        .state()
        .freezes
        .iter()
        .find(|f| f.expert.is_none())
        .expect("shared freeze recorded after task 0")
        .clone();
    t.run_task().unwrap();
    let Model::Expansion(pool) = t.model() else {
        panic!("expansion run holds a pool");
    };
    // Threshold 0 makes every task novel.
    assert_eq!(pool.len(), 2);
    assert_eq!(pool.shared_digest(t.store()), shared.digest);
    t.audit().unwrap();
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let good = config("unsupervised", FIXED2, TWO).to_toml();
    for (from, to) in [
        ("epochs = 3", "epochs = 0"),
        ("batch_size = 32", "batch_size = 0"),
        ("learning_rate = 0.05", "learning_rate = -1.0"),
        ("experts = 2", "experts = 0"),
        ("mode = \"unsupervised\"", "mode = \"bogus\""),
    ] {
        assert!(good.contains(from), "{from} not in\n{good}");
        let bad = good.replace(from, to);
        match RunConfig::from_toml(&bad) {
            Err(Error::Config(_)) => {}
            other => panic!("{to}: expected config error, got {:?}", other.map(|_| ())),
        }
    }
}

#[test]
fn shipped_configs_load_and_resolve() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = RunConfig::load(&path).unwrap();
            assert_eq!(cfg.resolve_tasks().unwrap().len(), cfg.tasks.len());
            seen += 1;
        }
    }
    assert!(seen >= 3);
}
