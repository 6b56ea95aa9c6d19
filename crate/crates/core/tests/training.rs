use std::path::Path;
use std::process::Command;

use drloc::data::{self, synthetic, DatasetSpec, LabeledImages, SyntheticSpec};
use drloc::drloc::{LossVariantSpec, Variant};
use drloc::numcore::{checkpoint, ParamSet, Tensor};
use drloc::plot::emit_plot_data;
use drloc::trainer::{
    adamw_step, params_bit_identical, read_metrics, run_experiment, AdamState, GradNormRecord, OptimSpec, RunSpec,
    Trainer, GRAD_NORMS_FILE,
};
use drloc::vit::VitConfig;

fn tiny(lambda: f64, variant: Variant, train: usize) -> (RunSpec, data::Dataset) {
    let ds = DatasetSpec {
        synthetic: SyntheticSpec {
            image_side: 8,
            samples_train: train,
            samples_test: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    let model = VitConfig {
        image_side: 8,
        patch_side: 2,
        embed_dim: 8,
        heads: 2,
        ..Default::default()
    };
    let loss = LossVariantSpec {
        variant,
        lambda,
        m: 6,
        hidden: 16,
        ..Default::default()
    };
    let optim = OptimSpec {
        total_epochs: 3,
        warmup_epochs: 1.0,
        batch_size: 16,
        ..Default::default()
    };
    let data = data::load(&ds, 8, 10).unwrap();
    let mut spec = RunSpec::new(model, loss, optim, ds.id(), 1);
    spec.record_timing = false;
    (spec, data)
}

/// Plain AdamW on `f(w) = sum_i c_i (w_i - t_i)^2`, written out longhand.
fn reference_adamw(w0: &[f64], c: &[f64], t: &[f64], lr: f64, wd: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut w = w0.to_vec();
    let mut m = vec![0.0; w.len()];
    let mut v = vec![0.0; w.len()];
    for step in 1..=steps {
        for i in 0..w.len() {
            let g = 2.0 * c[i] * (w[i] - t[i]);
            w[i] -= lr * wd * w[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / (1.0 - b1.powi(step as i32));
            let vh = v[i] / (1.0 - b2.powi(step as i32));
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    w
}

#[test]
fn adamw_matches_reference_on_a_quadratic() {
    let w0 = [1.0, -2.0, 0.5];
    let c = [1.0, 0.3, 4.0];
    let t = [0.2, 0.7, -1.0];
    let spec = OptimSpec {
        weight_decay: 0.05,
        ..Default::default()
    };
    let mut ps = ParamSet::new();
    ps.add("w", Tensor::new(vec![3], w0.to_vec()).unwrap(), true);
    let mut state = AdamState::new(&ps);
    for _ in 0..10 {
        let w = ps.iter().next().unwrap().value.data().to_vec();
        let g: Vec<f64> = (0..3).map(|i| 2.0 * c[i] * (w[i] - t[i])).collect();
        adamw_step(&mut ps, &[Some(g)], &mut state, 0.05, &spec).unwrap();
    }
    let want = reference_adamw(&w0, &c, &t, 0.05, 0.05, 10);
    for (a, b) in ps.iter().next().unwrap().value.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn first_batch_ce_does_not_depend_on_lambda() {
    let (a, data) = tiny(0.0, Variant::Drloc, 32);
    let mut b = a.clone();
    b.loss.lambda = 0.5;
    let (images, labels) = data.train.batch(&(0..16).collect::<Vec<_>>(), None).unwrap();
    let mut ta = Trainer::new(a).unwrap();
    let mut tb = Trainer::new(b).unwrap();
    let task = ta.task.clone().unwrap();
    let pairs = task.sample(&[4], 16, &mut drloc::rng::SeededRng::new(0)).unwrap();
    let (ce_a, aux_a) = ta.step(&images, &labels, Some(&pairs), 1e-3).unwrap();
    let (ce_b, aux_b) = tb.step(&images, &labels, Some(&pairs), 1e-3).unwrap();
    assert_eq!(ce_a.to_bits(), ce_b.to_bits());
    assert_eq!(aux_a.unwrap().to_bits(), aux_b.unwrap().to_bits());
    // the lambda > 0 step moved the head, the lambda = 0 step did not
    let head0 = &ta.task.as_ref().unwrap().heads.params;
    assert!(params_bit_identical(head0, &task.heads.params));
    assert!(!params_bit_identical(
        &tb.task.as_ref().unwrap().heads.params,
        &task.heads.params
    ));
}

#[test]
fn chunked_gradients_do_not_depend_on_worker_count() {
    let (mut a, data) = tiny(0.5, Variant::All, 40);
    a.grad_chunks = 3;
    let mut b = a.clone();
    b.jobs = 2;
    let ra = run_experiment(&a, &data, None).unwrap();
    let rb = run_experiment(&b, &data, None).unwrap();
    assert!(params_bit_identical(&ra.model.params, &rb.model.params));
    assert_eq!(ra.run.records, rb.run.records);
}

#[test]
fn every_variant_trains_and_records_each_epoch() {
    for v in Variant::ALL {
        let (spec, data) = tiny(0.5, v, 32);
        let out = run_experiment(&spec, &data, None).unwrap();
        assert_eq!(out.run.records.len(), 3, "{}", v.name());
        let last = out.run.final_record().unwrap();
        assert!(last.loss_total.is_finite() && last.pretext_l1.unwrap().is_finite());
        assert_eq!(last.loss_total, last.loss_ce + 0.5 * last.loss_aux.unwrap());
    }
}

#[test]
fn outputs_checkpoints_and_plot_curves() {
    let (mut spec, data) = tiny(0.1, Variant::Drloc, 32);
    spec.checkpoint_every = 2;
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let out = run_experiment(&spec, &data, Some(&run_dir)).unwrap();

    let records = read_metrics(&run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(records, out.run.records);
    let text = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    let keys: Vec<String> = serde_json::from_str::<serde_json::Value>(text.lines().next().unwrap())
        .unwrap()
        .as_object()
        .unwrap()
        .keys()
        .cloned()
        .collect();
    let mut want = [
        "epoch",
        "lr",
        "loss_ce",
        "loss_aux",
        "loss_total",
        "test_acc",
        "pretext_l1",
        "sec_per_batch",
    ];
    want.sort();
    let mut keys_sorted = keys.clone();
    keys_sorted.sort();
    assert_eq!(keys_sorted, want);

    let last = checkpoint::load(&run_dir.join("last.drl")).unwrap();
    let mut restored = out.model.params.clone();
    restored.load_from(&last).unwrap();
    assert!(params_bit_identical(&restored, &out.model.params));
    assert!(run_dir.join("epoch_002.drl").is_file());
    assert!(!run_dir.join("epoch_001.drl").exists());
    assert!(run_dir.join("best.drl").is_file());

    let plots = dir.path().join("plots");
    let files = emit_plot_data(std::slice::from_ref(&run_dir), &plots).unwrap();
    assert!(files
        .iter()
        .all(|f| f.file_name().unwrap().to_string_lossy().starts_with("run__")));
    let acc = std::fs::read_to_string(plots.join("run__test_acc.csv")).unwrap();
    let rows: Vec<&str> = acc.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (row, rec) in rows.iter().zip(&records) {
        let (e, v) = row.split_once(',').unwrap();
        assert_eq!(e.parse::<usize>().unwrap(), rec.epoch);
        assert_eq!(v.parse::<f64>().unwrap().to_bits(), rec.test_acc.unwrap().to_bits());
    }
    assert!(!plots.join("run__sec_per_batch.csv").exists());
}

fn grad_norm_lines(lambda: f64) -> Vec<GradNormRecord> {
    let (mut spec, data) = tiny(lambda, Variant::Drloc, 48);
    spec.record_grad_norms = true;
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&spec, &data, Some(dir.path())).unwrap();
    std::fs::read_to_string(dir.path().join(GRAD_NORMS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn grad_norms_split_the_loss_terms() {
    let off = grad_norm_lines(0.0);
    assert_eq!(off.len(), 3);
    assert!(off.iter().all(|r| r.aux_backbone == 0.0 && r.ce_backbone > 0.0));
    let on = grad_norm_lines(0.5);
    assert_eq!(on.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(on.iter().all(|r| r.aux_backbone > 0.0 && r.ce_backbone > 0.0));
}

#[test]
fn synthetic_data_carries_class_and_spatial_signal() {
    let spec = SyntheticSpec {
        samples_train: 400,
        samples_test: 200,
        ..Default::default()
    };
    let (train, test) = synthetic::generate(&spec).unwrap();

    // nearest class mean is a linear classifier on raw pixels
    let per = 3 * 28 * 28;
    let centroids = class_means(&train, per);
    let mut correct = 0;
    for (i, &l) in test.labels.iter().enumerate() {
        let x = &test.images.data()[i * per..(i + 1) * per];
        let best = (0..10)
            .filter(|&c| !centroids[c].is_empty())
            .min_by(|&a, &b| dist(x, &centroids[a]).total_cmp(&dist(x, &centroids[b])))
            .unwrap();
        correct += usize::from(best == l);
    }
    assert!(correct as f64 / test.len() as f64 > 0.2, "probe accuracy {correct}/200");

    // classes 0 and 1 light different quadrants
    let quadrant_mean = |img: &[f64], top: bool, left: bool| {
        let mut s = 0.0;
        for r in 0..14 {
            for c in 0..14 {
                let (r, c) = (if top { r } else { r + 14 }, if left { c } else { c + 14 });
                s += img[r * 28 + c];
            }
        }
        s / 196.0
    };
    let (c0, c1) = (&centroids[0], &centroids[1]);
    assert!(quadrant_mean(c0, true, true) - quadrant_mean(c1, true, true) > 0.5);
    assert!(quadrant_mean(c1, true, false) - quadrant_mean(c0, true, false) > 0.5);
}

fn class_means(set: &LabeledImages, per: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; per]; set.classes];
    let mut counts = vec![0usize; set.classes];
    for (i, &l) in set.labels.iter().enumerate() {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(&set.images.data()[i * per..(i + 1) * per]) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| {
            if n == 0 {
                Vec::new()
            } else {
                s.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_drloc")).args(args).output().unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    write(&bad, "[loss]\nlamda = 0.1\n");
    assert_eq!(
        cli(&["train", "--config", bad.to_str().unwrap()]).status.code(),
        Some(1)
    );
    assert_eq!(cli(&["train", "--variant", "nope"]).status.code(), Some(1));
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    let missing = dir.path().join("no-cifar");
    let out = cli(&[
        "train",
        "--dataset",
        "cifar10",
        "--data-dir",
        missing.to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = cli(&[
        "plot-data",
        "--runs",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("p").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // a learning rate this large overflows the weights within a step
    let huge = dir.path().join("huge.toml");
    write(
        &huge,
        "[optim]\nbase_lr = 1e300\nwarmup_epochs = 0.0\ntotal_epochs = 1\n[dataset.synthetic]\nsamples_train = 128\nsamples_test = 8\n",
    );
    let run_dir = dir.path().join("huge");
    let out = cli(&[
        "train",
        "--config",
        huge.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn cli_sweep_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    write(
        &cfg,
        "seeds = [0, 1]\n[model]\nimage_side = 8\npatch_side = 2\nembed_dim = 8\nheads = 2\n\
         [loss]\nm = 4\nhidden = 8\n[optim]\ntotal_epochs = 2\nwarmup_epochs = 0.5\nbatch_size = 16\n\
         [dataset.synthetic]\nimage_side = 8\nsamples_train = 32\nsamples_test = 16\n",
    );
    let run = |out: &str| {
        let o = cli(&[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--axis",
            "lambda",
            "--values",
            "0.0,0.5,x",
            "--out",
            dir.path().join(out).to_str().unwrap(),
            "--jobs",
            "2",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(dir.path().join(out).join("results.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "lambda,top1_mean,top1_std,runs,failed");
    assert!(lines[1].starts_with("0.0,") && lines[1].ends_with(",2,0"));
    assert!(lines[3].starts_with("x,") && lines[3].ends_with(",0,2"));
}
