//! Acceptance run: one PASS/FAIL line per criterion, executed sequentially
//! so that each runtime budget is measured on an otherwise idle core.
//!
//! Run with `cargo test -p b2t2 --test acceptance -- --nocapture` to see the lines.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use b2t2::data::{self, EncodeOptions, Example, Object, Record};
use b2t2::fusion::{self, ReferenceMatrix};
use b2t2::harness::{self, ChoiceLog, EvalReport, EvalTask, TrainConfig};
use b2t2::model::{Model, Variant};
use b2t2::numerics::{Graph, ParamStore, Tape, Tensor, Var};
use b2t2::objectives::{self, PretrainItem};
use b2t2::synthetic::{self, SyntheticSpec};
use b2t2::vocab::Vocab;
use common::gradcheck::{check_model, jitter, max_error, TOLERANCE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Folds a budget check into a verdict.
fn within(v: Verdict, took: Duration, budget: Duration) -> Verdict {
    let ok = took < budget;
    let detail = format!("{}; {:.1}s of {}s", v.detail, took.as_secs_f64(), budget.as_secs());
    verdict(v.pass && ok, detail)
}

fn report(n: usize, name: &str, v: &Verdict) {
    let status = if v.pass { "PASS" } else { "FAIL" };
    println!("criterion {n} {name}: {status} ({})", v.detail);
}

// 1. Finite differences.

const GRAD_SEEDS: u64 = 20;

type Op = fn(&mut Tape, &[Var]) -> b2t2::Result<Var>;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn gradient_suite() -> Verdict {
    use b2t2::numerics::Activation;
    let ops: Vec<(&str, Vec<Vec<usize>>, Op)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("transpose", vec![vec![3, 4]], |t, v| t.transpose(v[0])),
        ("add_bias", vec![vec![3, 4], vec![4]], |t, v| t.add_bias(v[0], v[1])),
        ("mul", vec![vec![2, 5], vec![2, 5]], |t, v| t.mul(v[0], v[1])),
        ("gelu", vec![vec![3, 4]], |t, v| Ok(t.activation(v[0], Activation::Gelu))),
        ("tanh", vec![vec![3, 4]], |t, v| Ok(t.activation(v[0], Activation::Tanh))),
        ("sigmoid", vec![vec![3, 4]], |t, v| Ok(t.activation(v[0], Activation::Sigmoid))),
        ("softmax", vec![vec![3, 5]], |t, v| t.softmax(v[0], 1)),
        ("masked_softmax", vec![vec![3, 4]], |t, v| t.masked_softmax(v[0], &[true, false, true, true])),
        ("log_softmax", vec![vec![3, 5]], |t, v| Ok(t.log_softmax(v[0]))),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-12)
        }),
        ("gather_rows", vec![vec![4, 3]], |t, v| t.gather_rows(v[0], &[3, 0, 3])),
        ("concat", vec![vec![2, 3], vec![1, 3]], |t, v| t.concat(&[v[0], v[1]], 0)),
    ];
    let mut worst: f64 = 0.0;
    let mut worst_op = "";
    for (name, shapes, op) in &ops {
        for seed in 0..GRAD_SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(s, &mut rng)).collect();
            let err = max_error(op, &inputs).unwrap();
            if err > worst {
                worst = err;
                worst_op = name;
            }
        }
    }

    let (train, _, vocab) = common::synthetic_split(5, GRAD_SEEDS as usize, 0);
    let mut model_worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let cfg = common::tiny_config(Variant::Full, vocab.len());
        let mut model = Model::init(cfg.clone(), seed).unwrap();
        jitter(&mut model.params, &mut rng);
        let ex = &train[seed as usize];
        let opts = EncodeOptions::for_variant(Variant::Full, cfg.encoder.max_positions);
        let inst = data::encode_qar(&ex.record, ex.dims(), rng.random_range(0..4), &vocab, &opts).unwrap();
        let err = check_model(
            &model.params,
            |g| {
                let m = fusion::margin(g, &cfg, &inst.input(&ex.image, None))?;
                objectives::bce_from_margin(g, m, inst.label)
            },
            &mut rng,
        );
        model_worst = model_worst.max(err);
    }
    verdict(
        worst <= TOLERANCE && model_worst <= TOLERANCE,
        format!(
            "{} ops and the full model over {GRAD_SEEDS} seeds; worst op error {worst:.1e} ({worst_op}), model {model_worst:.1e}",
            ops.len()
        ),
    )
}

// 2. Golden encodings.

fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn dense(rows: usize, cols: usize, ones: &[(usize, usize)]) -> Vec<Vec<u8>> {
    let mut m = vec![vec![0u8; cols]; rows];
    for &(i, j) in ones {
        m[i][j] = 1;
    }
    m
}

fn golden_encodings() -> Verdict {
    let rec: Record = serde_json::from_str(&std::fs::read_to_string(fixture("toy_record.json")).unwrap()).unwrap();
    let vocab = Vocab::read(&fixture("toy_vocab.txt")).unwrap();
    let dims = (24, 20);
    let full = EncodeOptions::for_variant(Variant::Full, 64);
    let (cls, sep, img, bx) = (0, 1, 4, 5);
    let (what, is, doing, dog, person, running) = (7, 8, 9, 10, 11, 12);
    let (because, legs, mv) = (14, 15, 16);
    let mut failures = Vec::new();
    let mut expect = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    let qa = data::encode_qa(&rec, dims, 0, &vocab, &full).unwrap();
    expect(
        "qa ids",
        qa.tokens.piece_ids == [cls, img, what, is, dog, bx, doing, sep, running, sep, person, bx, dog, bx],
    );
    expect("qa types", qa.tokens.type_ids == (0..14).map(|j| usize::from(j >= 8)).collect::<Vec<_>>());
    expect("qa refs", qa.refmatrix.to_rows() == dense(3, 14, &[(0, 1), (2, 5), (1, 11), (2, 13)]));

    let qar = data::encode_qar(&rec, dims, 0, &vocab, &full).unwrap();
    expect(
        "qar ids",
        qar.tokens.piece_ids
            == [cls, img, what, is, dog, bx, doing, sep, running, because, dog, bx, legs, mv, sep, person, bx, dog, bx],
    );
    expect("qar types", qar.tokens.type_ids == (0..19).map(|j| usize::from(j >= 8)).collect::<Vec<_>>());
    expect(
        "qar refs",
        qar.refmatrix.to_rows() == dense(3, 19, &[(0, 1), (2, 5), (2, 11), (1, 16), (2, 18)]),
    );

    let bare = EncodeOptions::for_variant(Variant::NoClassLabels, 64);
    let nl = data::encode_qa(&rec, dims, 0, &vocab, &bare).unwrap();
    expect("unlabeled ids", nl.tokens.piece_ids == [cls, img, what, is, bx, doing, sep, running, sep, bx, bx]);

    let mut many = rec.clone();
    many.objects = (0..10)
        .map(|i| Object(i as f64, 0.0, i as f64 + 2.0, 4.0, ["person", "dog"][i % 2].to_string()))
        .collect();
    let inst = data::encode_qa(&many, dims, 0, &vocab, &full).unwrap();
    let head = [cls, img, what, is, dog, bx, doing, sep, running, sep];
    let mut ids = head.to_vec();
    let mut ones = vec![(0, 1), (2, 5)];
    for i in 0..8 {
        ids.extend([[person, dog][i % 2], bx]);
        ones.push((i + 1, head.len() + 2 * i + 1));
    }
    expect("eight appended ids", inst.tokens.piece_ids == ids);
    expect("eight appended refs", inst.refmatrix.to_rows() == dense(11, ids.len(), &ones));

    if failures.is_empty() {
        verdict(true, "qa, qar, unlabeled and 8-box fixtures match")
    } else {
        verdict(false, format!("mismatched: {}", failures.join(", ")))
    }
}

// 3 and 4. Experiments on the synthetic split.

/// The desk model used by both experiments.
const DESK_CONFIG: &str = r#"
learning_rate = 0.003
epochs = 10
batch_size = 32
seed = 0
tasks = ["qa"]

[model.encoder]
num_layers = 2
num_heads = 2
hidden = 32
ffn_dim = 64
vocab_size = 0
max_positions = 32
dropout_rate = 0.0

[grid]
learning_rates = [0.003]
epochs = [10]
seeds = [0]
"#;

struct Split {
    train: Vec<Example>,
    val: Vec<Example>,
    captions: Vec<(Arc<b2t2::vision::Image>, String)>,
    vocab: Vocab,
}

fn hard_split() -> Split {
    let d = synthetic::generate(&SyntheticSpec::default()).unwrap();
    let train = common::examples(&d.train);
    let captions = train
        .iter()
        .zip(&d.captions)
        .map(|(ex, c)| (ex.image.clone(), c.caption.clone()))
        .collect();
    Split { val: common::examples(&d.val), train, captions, vocab: d.vocab }
}

fn fusion_ordering(split: &Split) -> Verdict {
    let cfg = TrainConfig::from_toml(DESK_CONFIG).unwrap();
    let variants = [
        Variant::Full,
        Variant::TextOnly,
        Variant::NoBoxes,
        Variant::DualEncoder,
        Variant::LateFusion,
    ];
    let rows = harness::run_ablation(&cfg, &variants, &split.train, &split.val, &split.vocab, None).unwrap();
    let qa = |v: Variant| rows.iter().find(|r| r.variant == v).and_then(|r| r.qa).unwrap();
    let full = qa(Variant::Full);
    let checks = [
        full >= 0.95,
        qa(Variant::TextOnly) <= 0.35,
        full - qa(Variant::NoBoxes) >= 0.10,
        full - qa(Variant::DualEncoder) >= 0.10,
        full - qa(Variant::LateFusion) >= 0.05,
    ];
    let detail = variants.iter().map(|&v| format!("{v} {:.3}", qa(v))).collect::<Vec<_>>().join(", ");
    verdict(checks.iter().all(|&c| c), format!("val Q->A {detail}"))
}

/// Seeds and schedule of the pretraining study: the desk model with fewer
/// epochs so that 16 finetuning runs and 8 pretraining runs fit the budget.
const STUDY_SEEDS: [u64; 8] = [0, 1, 2, 3, 4, 5, 6, 7];
const STUDY_EPOCHS: usize = 7;
const STUDY_PRETRAIN_EPOCHS: usize = 3;

fn pretraining_stability(split: &Split) -> Verdict {
    let mut cfg = TrainConfig::from_toml(DESK_CONFIG).unwrap();
    cfg.epochs = STUDY_EPOCHS;
    cfg.pretrain.epochs = STUDY_PRETRAIN_EPOCHS;
    let study =
        harness::pretraining_study(&cfg, &STUDY_SEEDS, &split.train, &split.val, &split.captions, &split.vocab)
            .unwrap();
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    verdict(
        study.std_with <= study.std_without,
        format!(
            "std with {:.4} [{}], without {:.4} [{}]",
            study.std_with,
            fmt(&study.with),
            study.std_without,
            fmt(&study.without)
        ),
    )
}

// 5. Metrics against brute force.

fn metric_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut agree = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..300);
        let logs: Vec<ChoiceLog> = (0..n)
            .map(|_| ChoiceLog {
                answer: Some(rng.random_range(0..4)),
                rationale: Some(rng.random_range(0..4)),
                correct_answer: rng.random_range(0..4),
                correct_rationale: rng.random_range(0..4),
            })
            .collect();
        let (mut a, mut r, mut both) = (0, 0, 0);
        for c in &logs {
            let ha = c.answer == Some(c.correct_answer);
            let hr = c.rationale == Some(c.correct_rationale);
            a += usize::from(ha);
            r += usize::from(hr);
            both += usize::from(ha && hr);
        }
        let rep = EvalReport::from_choices(logs, String::new());
        let nf = n as f64;
        if rep.qa == Some(a as f64 / nf) && rep.qar == Some(r as f64 / nf) && rep.q2ar == Some(both as f64 / nf) {
            agree += 1;
        }
    }
    let logs: Vec<ChoiceLog> = (0..10_000)
        .map(|_| ChoiceLog {
            answer: Some(rng.random_range(0..4)),
            rationale: Some(rng.random_range(0..4)),
            correct_answer: rng.random_range(0..4),
            correct_rationale: rng.random_range(0..4),
        })
        .collect();
    let chance = EvalReport::from_choices(logs, String::new()).q2ar.unwrap();
    verdict(
        agree == 100 && (chance - 1.0 / 16.0).abs() <= 0.02,
        format!("{agree}/100 patterns agree; uniform Q->AR {chance:.4}"),
    )
}

// 6. Structural invariants.

fn invariants() -> Verdict {
    let mut failures: Vec<&str> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(66);

    let d = synthetic::generate(&common::spec(66, 40, 0)).unwrap();
    let columns_ok = d.train.iter().all(|rec| {
        Variant::ALL.iter().all(|&v| {
            let opts = EncodeOptions::for_variant(v, 64);
            (0..4).all(|k| {
                let inst = data::encode_qar(rec, (32, 32), k, &d.vocab, &opts).unwrap();
                (0..inst.refmatrix.cols()).all(|j| inst.refmatrix.column_sum(j) <= 1)
            })
        })
    });
    if !columns_ok || ReferenceMatrix::from_rows(&[vec![1, 0], vec![1, 0]]).is_ok() {
        failures.push("reference column sums");
    }

    let fuse_ok = (0..50).all(|_| {
        let (n, m, h) = (rng.random_range(1..8), rng.random_range(1..5), rng.random_range(1..6));
        let e = uniform(&[n, h], &mut rng);
        let v = uniform(&[m, h], &mut rng);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let ev = g.tape.constant(e.clone());
        let vv = g.tape.constant(v);
        let out = fusion::fuse(&mut g, ev, &ReferenceMatrix::zeros(m, n), vv).unwrap();
        g.tape.data(out) == e.data()
    });
    if !fuse_ok {
        failures.push("fuse identity");
    }

    let grid_ok = (0..1000).all(|_| {
        let k = rng.random_range(1..64);
        let norm: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..=k as f64));
        let idx = fusion::grid_indices(norm, k).unwrap();
        idx.iter().zip(norm).all(|(&i, c)| i == (c.floor() as usize).min(k - 1))
    }) && fusion::grid_indices([0.0, 0.0, 15.0, 1.0], 14).is_err();
    if !grid_ok {
        failures.push("grid clamp/floor");
    }

    let captions: Vec<String> = d.captions.iter().map(|c| c.caption.clone()).collect();
    let images = common::examples(&d.train[..6]);
    let model = Model::init(common::tiny_config(Variant::Full, d.vocab.len()), 3).unwrap();
    let gating_ok = (0..6).all(|idx| {
        let [positive, impostor] =
            data::pretrain_items(&captions[..6], idx, images[idx].dims(), &d.vocab, 32, 0.5, &mut rng).unwrap();
        let gated = PretrainItem { targets: positive.targets.clone(), ..impostor.clone() };
        let loss = |item: &PretrainItem| {
            let mut g = Graph::new(&model.params);
            let l = objectives::pretrain_loss(&mut g, &model.config, item, &images[idx].image, None).unwrap();
            let v = g.tape.data(l)[0];
            let grads = g.backward(l).unwrap();
            (v, grads.get("encoder.mlm.bias").map_or(0.0, |g| g.iter().map(|x| x.abs()).sum::<f64>()))
        };
        let (a, bias) = loss(&gated);
        let (b, _) = loss(&impostor);
        a == b && bias == 0.0
    });
    if !gating_ok {
        failures.push("mlm gating");
    }

    let (_, val, vocab) = common::synthetic_split(67, 1, 20);
    let mut m = Model::init(common::tiny_config(Variant::Full, vocab.len()), 1).unwrap();
    for v in m.params.get_mut("fusion.a").unwrap().data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let single = harness::evaluate(&m, &val, &vocab, EvalTask::Q2ar).unwrap();
    let ens = harness::ensemble(&vec![m.clone(); 5], &val, &vocab, EvalTask::Q2ar).unwrap();
    if ens.choices != single.choices {
        failures.push("ensemble of identical members");
    }
    if single.q2ar.unwrap() > single.qa.unwrap().min(single.qar.unwrap()) {
        failures.push("q2ar bound");
    }

    if failures.is_empty() {
        verdict(true, "column sums, fuse identity, grid clamp, mlm gating, ensemble argmax, q2ar bound")
    } else {
        verdict(false, format!("violated: {}", failures.join(", ")))
    }
}

// 7. Determinism.

fn determinism() -> Verdict {
    let spec = common::spec(77, 24, 8);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synthetic::write(&synthetic::generate(&spec).unwrap(), &a).unwrap();
    synthetic::write(&synthetic::generate(&spec).unwrap(), &b).unwrap();
    let gen_ok = ["train.jsonl", "val.jsonl", "captions.jsonl"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());

    let train = data::load_examples(&a.join("train.jsonl")).unwrap();
    let vocab = Vocab::read(&a.join("vocab.txt")).unwrap();
    let mut cfg = TrainConfig::from_toml(DESK_CONFIG).unwrap();
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.model.encoder.dropout_rate = 0.1;
    cfg.tasks = vec![data::Task::Qa, data::Task::Qar];
    let bytes = |name: &str| {
        let mut model = harness::build_model(&cfg, &vocab).unwrap();
        harness::train(&cfg, &mut model, &train, &vocab).unwrap();
        let path = dir.path().join(name);
        model.save(&path, &vocab).unwrap();
        std::fs::read(path).unwrap()
    };
    let train_ok = bytes("one.ckpt") == bytes("two.ckpt");
    verdict(gen_ok && train_ok, format!("gen identical: {gen_ok}; checkpoints identical: {train_ok}"))
}

#[test]
fn acceptance() {
    let mut all = true;
    let mut run = |n: usize, name: &str, budget: Option<u64>, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let v = match budget {
            Some(secs) => within(v, start.elapsed(), Duration::from_secs(secs)),
            None => v,
        };
        report(n, name, &v);
        all &= v.pass;
    };
    run(1, "gradient suite", Some(60), &mut gradient_suite);
    run(2, "golden encoding", None, &mut golden_encodings);
    let split = hard_split();
    run(3, "fusion ordering", Some(600), &mut || fusion_ordering(&split));
    run(4, "pretraining stability", Some(900), &mut || pretraining_stability(&split));
    run(5, "metric oracle", None, &mut metric_oracle);
    run(6, "invariants", None, &mut invariants);
    run(7, "determinism", None, &mut determinism);
    assert!(all, "at least one acceptance criterion failed");
}
