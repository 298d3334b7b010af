use mulki_core::encoder::Embedder;
use mulki_core::losses::{self, Components};
use mulki_core::metrics::{self, AccuracyMatrix};
use mulki_core::optim::{adamw_step, AdamWState};
use mulki_core::runner::{self, pretrain, run_stream, train_task, PretrainConfig, TaskContext};
use mulki_core::taskgen::{generate_stream, StreamConfig, StreamMode};
use mulki_core::{DualEncoder, Error, Graph, HyperParams, ModelSnapshot, PrototypeStore, Result, StreamSpec, Tensor};

fn small_stream(mode: StreamMode, seed: u64) -> StreamSpec {
    let cfg = StreamConfig {
        mode,
        n_tasks: 3,
        classes_per_task: 3,
        d_in: 8,
        class_subspace: 4,
        train_per_class: 40,
        test_per_class: 10,
        pretrain_per_class: 8,
        min_domain_distance: 1.0,
        ..Default::default()
    };
    generate_stream(&cfg, seed).unwrap()
}

fn small_pretrain() -> PretrainConfig {
    PretrainConfig {
        iterations: 40,
        ..Default::default()
    }
}

fn quick(h: HyperParams) -> HyperParams {
    HyperParams {
        iterations_per_task: 30,
        batch_size: 8,
        we_interval: 5,
        ewe_eta: 2,
        ..h
    }
}

#[test]
fn pretraining_without_iterations_is_the_random_init() {
    let s = small_stream(StreamMode::MultiDomain, 1);
    let cfg = PretrainConfig {
        iterations: 0,
        ..Default::default()
    };
    let c0 = pretrain(&s, &cfg, 9).unwrap();
    let init = DualEncoder::init(9, cfg.model.dims_for(&s)).unwrap();
    assert_eq!(c0.params_flat(), init.params_flat());
}

#[test]
fn pretraining_is_deterministic_and_moves_parameters() {
    let s = small_stream(StreamMode::MultiDomain, 1);
    let a = pretrain(&s, &small_pretrain(), 3).unwrap();
    let b = pretrain(&s, &small_pretrain(), 3).unwrap();
    assert_eq!(a, b);
    let zero = pretrain(&s, &PretrainConfig { iterations: 0, ..small_pretrain() }, 3).unwrap();
    assert_ne!(a.params_flat(), zero.params_flat());
}

#[test]
fn empty_pretraining_pool_is_a_config_error() {
    let mut s = small_stream(StreamMode::MultiDomain, 1);
    s.pretrain_pool.clear();
    assert!(matches!(pretrain(&s, &small_pretrain(), 0), Err(Error::Config(_))));
}

#[test]
fn initial_model_has_headroom_on_the_default_stream() {
    let cfg = StreamConfig::default();
    let k = cfg.classes_per_task as f64;
    let mut per_task = vec![0.0; cfg.n_tasks];
    for seed in 0..5 {
        let s = generate_stream(&cfg, seed).unwrap();
        let c0 = pretrain(&s, &PretrainConfig::default(), seed).unwrap();
        for (j, a) in runner::zero_shot_row(&c0, &s).unwrap().into_iter().enumerate() {
            per_task[j] += a / 5.0;
        }
    }
    for (j, a) in per_task.iter().enumerate() {
        assert!(*a > 1.0 / k + 0.1 && *a < 0.95, "task {j}: {a}");
    }
}

/// Plain fine-tuning written out directly against the primitives.
fn reference_finetune(stream: &StreamSpec, c0: &ModelSnapshot, h: &HyperParams, seed: u64) -> Vec<Vec<f64>> {
    let mut model = c0.thaw();
    let mut out = Vec::new();
    for task in &stream.tasks {
        let tokens = task.tokens();
        let mut flat = model.params_flat();
        let mut state = AdamWState::new(flat.len());
        for k in 1..=h.iterations_per_task {
            let (x, labels) = task.batch(h.batch_size, seed, k).unwrap();
            let local: Vec<usize> = labels.iter().map(|&c| task.local_index(c).unwrap()).collect();
            let mut g = Graph::new();
            let enc = model.bind(&mut g, true);
            let xv = g.constant(x);
            let f = enc.encode_images(&mut g, xv).unwrap();
            let t = enc.encode_texts(&mut g, &tokens).unwrap();
            let l = losses::classification_loss(&mut g, f, t, &local, h.tau_ce).unwrap();
            g.backward(l).unwrap();
            adamw_step(&mut flat, &enc.grads_flat(&g), &mut state, &h.adamw()).unwrap();
            model.load_flat(&flat).unwrap();
        }
        out.push(flat);
    }
    out
}

#[test]
fn disabled_components_reproduce_plain_finetuning_bitwise() {
    let s = small_stream(StreamMode::MultiDomain, 2);
    let c0 = pretrain(&s, &small_pretrain(), 2).unwrap();
    let ft = quick(HyperParams::continual_ft());
    let reference = reference_finetune(&s, &c0, &ft, 5);
    let flags_off = HyperParams {
        enable: Components::NONE,
        ..quick(HyperParams::default())
    };
    let zero_lambdas = HyperParams {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda_wc: 0.0,
        enable: Components {
            we: false,
            ..Components::default()
        },
        ..quick(HyperParams::default())
    };
    for h in [ft, flags_off, zero_lambdas] {
        let rec = run_stream(&s, &c0, &h, 5).unwrap();
        let got: Vec<Vec<f64>> = rec.checkpoints.iter().map(|c| c.params_flat()).collect();
        assert_eq!(got.len(), reference.len());
        for (a, b) in got.iter().zip(&reference) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn teachers_stay_fixed_and_store_is_purged() {
    let s = small_stream(StreamMode::MultiDomain, 3);
    let c0 = pretrain(&s, &small_pretrain(), 3).unwrap();
    let prev = {
        let mut m = c0.thaw();
        let mut flat = m.params_flat();
        flat.iter_mut().for_each(|v| *v *= 0.9);
        m.load_flat(&flat).unwrap();
        m.snapshot()
    };
    let (c0_before, prev_before) = (c0.params_flat(), prev.params_flat());
    let h = quick(HyperParams::default());
    let theta_prev = prev.params_flat();
    let mut student = prev.thaw();
    let mut store = PrototypeStore::new(h.gamma()).unwrap();
    let ctx = TaskContext {
        task: &s.tasks[1],
        c0: &c0,
        prev: &prev,
        theta_prev: &theta_prev,
        hyper: &h,
        seed: 0,
    };
    let log = train_task(&mut student, &mut store, &ctx).unwrap();
    assert_eq!(log.len(), h.iterations_per_task as usize);
    assert!(store.is_empty());
    assert_eq!(store.updates(), 0);
    assert!(c0.params_flat().iter().zip(&c0_before).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(prev.params_flat().iter().zip(&prev_before).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_ne!(student.params_flat(), theta_prev);

    // a store carrying another task's prototypes is refused
    store.init_from_model(&c0, &s.tasks[0].train_by_class().unwrap()).unwrap();
    let err = train_task(&mut student, &mut store, &ctx);
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn non_finite_loss_aborts_with_breakdown() {
    let s = small_stream(StreamMode::MultiDomain, 4);
    let c0 = pretrain(&s, &small_pretrain(), 4).unwrap();
    let h = HyperParams {
        tau_ce: 1e-310,
        ..quick(HyperParams::default())
    };
    match run_stream(&s, &c0, &h, 0) {
        Err(Error::NonFinite { task, iteration, detail }) => {
            assert_eq!((task, iteration), (0, 1));
            assert!(detail.contains("ce="));
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn total_loss_decreases_early_on_the_default_stream() {
    let mut drops = Vec::new();
    for seed in 0..5 {
        let s = generate_stream(&StreamConfig::default(), seed).unwrap();
        let c0 = pretrain(&s, &PretrainConfig::default(), seed).unwrap();
        let h = HyperParams {
            iterations_per_task: 50,
            ..HyperParams::default()
        };
        let theta = c0.params_flat();
        let mut student = c0.thaw();
        let mut store = PrototypeStore::new(h.gamma()).unwrap();
        let ctx = TaskContext {
            task: &s.tasks[0],
            c0: &c0,
            prev: &c0,
            theta_prev: &theta,
            hyper: &h,
            seed,
        };
        let log = train_task(&mut student, &mut store, &ctx).unwrap();
        assert!(log.iter().all(|l| l.loss.is_finite()));
        let mean = |r: &[runner::IterationLog]| r.iter().map(|l| l.loss.total).sum::<f64>() / r.len() as f64;
        drops.push(mean(&log[..10]) - mean(&log[40..]));
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[2] > 0.0, "{drops:?}");
}

#[test]
fn runs_are_deterministic_and_row_zero_is_the_initial_model() {
    for mode in [StreamMode::MultiDomain, StreamMode::ClassIncremental] {
        let s = small_stream(mode, 6);
        let c0 = pretrain(&s, &small_pretrain(), 6).unwrap();
        let h = quick(HyperParams {
            enable: Components {
                ewe: true,
                ..Components::default()
            },
            ..HyperParams::default()
        });
        let a = run_stream(&s, &c0, &h, 11).unwrap();
        let b = run_stream(&s, &c0, &h, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.matrix.rows().len(), s.n_tasks() + 1);
        assert_eq!(a.matrix.zero_shot_row(), &metrics::evaluate_row(&c0, &s, 0).unwrap()[..]);
        assert_eq!(a.checkpoints.len(), s.n_tasks());
        assert_eq!(a.losses.len() as u64, h.iterations_per_task * s.n_tasks() as u64);
    }
}

/// Maps each image to the one-hot of its true class, read from a marker
/// coordinate, and each class token to its own one-hot.
struct Oracle {
    n: usize,
    scale: f64,
}

impl Embedder for Oracle {
    fn embed_images(&self, x: &Tensor) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = (0..x.rows())
            .map(|i| {
                let mut v = vec![0.0; self.n];
                v[x.row(i)[0] as usize + 1] = self.scale;
                v
            })
            .collect();
        Tensor::from_rows(&rows, self.n)
    }
    fn embed_texts(&self, tokens: &[usize]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| {
                let mut v = vec![0.0; self.n];
                v[t] = self.scale;
                v
            })
            .collect();
        Tensor::from_rows(&rows, self.n)
    }
}

#[test]
fn oracle_lookup_scores_perfectly() {
    for mode in [StreamMode::MultiDomain, StreamMode::ClassIncremental] {
        let mut s = small_stream(mode, 7);
        for t in &mut s.tasks {
            for x in &mut t.test_samples {
                x.x[0] = x.class_id as f64;
            }
        }
        let n = s.vocab_size();
        for row in 0..=s.n_tasks() {
            let r = metrics::evaluate_row(&Oracle { n, scale: 1.0 }, &s, row).unwrap();
            assert!(r.iter().all(|&a| a == 1.0), "{r:?}");
        }
    }
}

#[test]
fn accuracy_ignores_embedding_scale() {
    struct Scaled<'a>(&'a ModelSnapshot);
    impl Embedder for Scaled<'_> {
        fn embed_images(&self, x: &Tensor) -> Result<Tensor> {
            let t = self.0.embed_images(x)?;
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * 2.0).collect())
        }
        fn embed_texts(&self, tokens: &[usize]) -> Result<Tensor> {
            let t = self.0.embed_texts(tokens)?;
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * 2.0).collect())
        }
    }
    let s = small_stream(StreamMode::MultiDomain, 8);
    let c0 = pretrain(&s, &small_pretrain(), 8).unwrap();
    assert_eq!(
        metrics::evaluate_row(&c0, &s, 0).unwrap(),
        metrics::evaluate_row(&Scaled(&c0), &s, 0).unwrap()
    );
}

#[test]
fn random_model_scores_near_chance() {
    let cfg = StreamConfig::default();
    let mut mean = 0.0;
    for seed in 0..5 {
        let s = generate_stream(&cfg, seed).unwrap();
        let m = pretrain(&s, &PretrainConfig { iterations: 0, ..Default::default() }, seed + 100).unwrap();
        let row = metrics::evaluate_row(&m, &s, 0).unwrap();
        mean += row.iter().sum::<f64>() / row.len() as f64 / 5.0;
    }
    let chance = 1.0 / cfg.classes_per_task as f64;
    assert!((mean - chance).abs() < 0.1, "{mean}");
}

#[test]
fn empty_test_set_is_a_contract_error() {
    let mut s = small_stream(StreamMode::MultiDomain, 9);
    s.tasks[0].test_samples.clear();
    let c0 = pretrain(&s, &PretrainConfig { iterations: 0, ..Default::default() }, 0).unwrap();
    let cands = metrics::candidates(&s, 0, 0);
    assert!(matches!(metrics::evaluate(&c0, &s.tasks[0], &cands), Err(Error::Contract(_))));
}

#[test]
fn class_incremental_candidates_grow_with_seen_tasks() {
    let s = small_stream(StreamMode::ClassIncremental, 10);
    assert_eq!(metrics::candidates(&s, 0, 0).len(), 3);
    assert_eq!(metrics::candidates(&s, 2, 0).len(), 6);
    assert_eq!(metrics::candidates(&s, 1, 2).len(), 9);
    let md = small_stream(StreamMode::MultiDomain, 10);
    assert_eq!(metrics::candidates(&md, 3, 1).len(), 3);
}

#[test]
fn matrix_serializes_as_nested_rows() {
    let a = AccuracyMatrix::from_rows(vec![vec![0.5, 0.5], vec![1.0, 0.5], vec![1.0, 1.0]]).unwrap();
    assert_eq!(a.rows()[1], vec![1.0, 0.5]);
}
