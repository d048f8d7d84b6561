//! Acceptance checks, one printed line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the console.
//! Criterion numbers given as arguments restrict the run:
//! `cargo test --test acceptance -- 2 8`.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use partseg_core::autograd::Tape;
use partseg_core::config::RunConfig;
use partseg_core::data::{sample_episode, Category, Mask, Partition};
use partseg_core::encoders::{encode_text_on, EncoderConfig};
use partseg_core::harness::{evaluate_run, run_ablation, sweep_m, DEFAULT_ABLATION, DEFAULT_SWEEP};
use partseg_core::losses::{miou, softmax_prob, Branch, LogitVolume};
use partseg_core::model::{logit_volumes, ModelConfig, PartSegModel};
use partseg_core::prompt::{Mode, PromptDesign, SharedTokenBank};
use partseg_core::prototypes::masked_average_pool;
use partseg_core::tensor::Tensor;
use partseg_core::trainer::Trainer;
use partseg_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: partseg_core::Error) -> String {
    e.to_string()
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// 1 ---------------------------------------------------------------------------

fn map_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut pooled = 0;
    for _ in 0..50 {
        let c = rng.random_range(1..=16);
        let h = rng.random_range(1..=8);
        let w = rng.random_range(1..=8);
        let n_classes = rng.random_range(1..=5u8);
        let f = Tensor::randn(&mut rng, &[c, h, w], 1.0);
        let labels = (0..h * w).map(|_| rng.random_range(0..n_classes)).collect();
        let m = Mask::new(h, w, labels).map_err(err)?;
        for k in 0..n_classes {
            let got = masked_average_pool(&f, &m, k).map_err(err)?;
            let mut sum = vec![0.0; c];
            let mut count = 0;
            for y in 0..h {
                for x in 0..w {
                    if m.get(y, x) == k {
                        for (ch, s) in sum.iter_mut().enumerate() {
                            *s += f.data()[(ch * h + y) * w + x];
                        }
                        count += 1;
                    }
                }
            }
            match got {
                None => ensure(count == 0, || format!("class {k} reported absent with {count} pixels"))?,
                Some(v) => {
                    ensure(count > 0, || format!("class {k} reported present without pixels"))?;
                    for (a, s) in v.iter().zip(&sum) {
                        worst = worst.max(rel_err(*a, s / count as f64, 1e-300));
                    }
                    pooled += 1;
                }
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max relative error {worst:e}"))?;
    Ok(format!("50 cases, {pooled} prototypes, max rel err {worst:.1e}"))
}

// 2 ---------------------------------------------------------------------------

struct Probe {
    model: PartSegModel,
    category: Category,
    support: Vec<Tensor>,
    support_masks: Vec<Mask>,
    query: Tensor,
    query_mask: Mask,
}

fn probe(rng: &mut ChaCha8Rng, seed: u64) -> Result<Probe> {
    let c = rng.random_range(2..=16);
    let h = rng.random_range(2..=6);
    let w = h;
    let n = rng.random_range(1..=4usize);
    let names = ["Probe body", "Probe head", "Probe wing", "Probe tail"];
    let category = Category::new("Probe", &names[..n])?;
    let mut keys: Vec<String> = category.parts.iter().map(|p| p.normalized_name.clone()).collect();
    keys.push("background".into());
    let config = ModelConfig {
        design: PromptDesign::Ppl,
        n_specific: 2,
        n_shared: 2,
        momentum: rng.random_range(0.0..0.99),
        encoder: EncoderConfig {
            channels: c,
            token_dim: 4,
            n_text: 2,
            text_hidden: 8,
            context_limit: 8,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    };
    let model = PartSegModel::new(config, &keys, seed)?;
    let shots = rng.random_range(1..=2);
    let mask = |rng: &mut ChaCha8Rng| {
        Mask::new(h, w, (0..h * w).map(|_| rng.random_range(0..=n as u8)).collect())
    };
    let mut support = Vec::new();
    let mut support_masks = Vec::new();
    for _ in 0..shots {
        support.push(Tensor::randn(rng, &[c, h, w], 0.5));
        support_masks.push(mask(rng)?);
    }
    Ok(Probe {
        model,
        category,
        support,
        support_masks,
        query: Tensor::randn(rng, &[c, h, w], 0.5),
        query_mask: mask(rng)?,
    })
}

/// Total loss with features as leaves, plus every gradient by name.
fn probe_loss(p: &Probe) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let support: Vec<_> = p
        .support
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(&format!("feat.s{i}"), t))
        .collect();
    let query = tape.param("feat.q", &p.query);
    let fwd = p
        .model
        .forward_features(&mut tape, &p.category, &support, &p.support_masks, query, Mode::Train)?;
    let loss = p.model.loss(&mut tape, &fwd, &p.query_mask)?;
    let grads = tape.backward(loss.total)?.by_name();
    Ok((tape.value(loss.total).data()[0], grads))
}

fn perturbed(p: &Probe, name: &str, i: usize, delta: f64) -> Result<f64> {
    let mut q = Probe {
        model: p.model.clone(),
        category: p.category.clone(),
        support: p.support.clone(),
        support_masks: p.support_masks.clone(),
        query: p.query.clone(),
        query_mask: p.query_mask.clone(),
    };
    let t: &mut Tensor = if name == "feat.q" {
        &mut q.query
    } else if let Some(s) = name.strip_prefix("feat.s") {
        &mut q.support[s.parse::<usize>().expect("shot index")]
    } else if let Some(key) = name.strip_prefix("bank.") {
        &mut q.model.bank.entry_mut(key)?.current
    } else {
        q.model.params.get_mut(name).expect("known parameter")
    };
    t.data_mut()[i] += delta;
    Ok(probe_loss(&q)?.0)
}

/// Text-branch loss with the prompt tokens themselves as leaves.
fn prompt_loss(p: &Probe, prompts: &[Tensor], classes: &[u8]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let q = tape.constant(p.query.clone());
    let leaves: Vec<_> = prompts
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(&format!("prompt.{i}"), t))
        .collect();
    let mut protos = Vec::new();
    for &l in &leaves {
        protos.push(encode_text_on(&p.model.bundle, &mut tape, &p.model.params, l)?);
    }
    let protos = tape.concat_rows(&protos)?;
    let logits = tape.correlate(q, protos)?;
    let targets: Vec<Option<usize>> = p
        .query_mask
        .data()
        .iter()
        .map(|t| classes.iter().position(|c| c == t))
        .collect();
    let loss = tape.softmax_xent(logits, &targets)?;
    let grads = tape.backward(loss)?;
    let g = leaves
        .iter()
        .map(|&l| grads.get(l).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(l))))
        .collect();
    Ok((tape.value(loss).data()[0], g))
}

fn gradient_fidelity() -> Outcome {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut checked = 0;
    let mut groups = BTreeMap::<&str, usize>::new();
    for case in 0..20u64 {
        let p = probe(&mut rng, case).map_err(err)?;
        let (_, grads) = probe_loss(&p).map_err(err)?;
        for (name, g) in &grads {
            let group = match name.split('.').next().unwrap_or("") {
                "feat" => "features",
                "ppg" => "generator",
                "bank" => "v_cur",
                _ => "encoder",
            };
            for _ in 0..4 {
                let i = rng.random_range(0..g.len());
                let up = perturbed(&p, name, i, H).map_err(err)?;
                let down = perturbed(&p, name, i, -H).map_err(err)?;
                let fd = (up - down) / (2.0 * H);
                let e = rel_err(g.data()[i], fd, FLOOR);
                if e > worst {
                    worst = e;
                    worst_at = format!("{name}[{i}]: {:.3e} vs {fd:.3e}", g.data()[i]);
                }
                checked += 1;
                *groups.entry(group).or_default() += 1;
            }
        }
        let mut tape = Tape::new();
        let support: Vec<_> = p.support.iter().map(|t| tape.constant(t.clone())).collect();
        let query = tape.constant(p.query.clone());
        let fwd = p
            .model
            .forward_features(&mut tape, &p.category, &support, &p.support_masks, query, Mode::Train)
            .map_err(err)?;
        let prompts: Vec<Tensor> = fwd.prompts.iter().map(|&v| tape.value(v).clone()).collect();
        let (_, pg) = prompt_loss(&p, &prompts, &fwd.classes).map_err(err)?;
        for (k, g) in pg.iter().enumerate() {
            for _ in 0..3 {
                let i = rng.random_range(0..g.len());
                let mut up = prompts.clone();
                up[k].data_mut()[i] += H;
                let mut down = prompts.clone();
                down[k].data_mut()[i] -= H;
                let fd = (prompt_loss(&p, &up, &fwd.classes).map_err(err)?.0
                    - prompt_loss(&p, &down, &fwd.classes).map_err(err)?.0)
                    / (2.0 * H);
                let e = rel_err(g.data()[i], fd, FLOOR);
                if e > worst {
                    worst = e;
                    worst_at = format!("prompt {k}[{i}]: {:.3e} vs {fd:.3e}", g.data()[i]);
                }
                checked += 1;
                *groups.entry("prompt tokens").or_default() += 1;
            }
        }
    }
    for g in ["features", "generator", "v_cur", "prompt tokens"] {
        ensure(groups.get(g).copied().unwrap_or(0) > 0, || format!("no {g} gradient was probed"))?;
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:e} at {worst_at}"))?;
    Ok(format!(
        "20 configurations, {checked} coordinates ({}), max rel err {worst:.1e} at {worst_at}",
        groups.iter().map(|(k, v)| format!("{k} {v}")).collect::<Vec<_>>().join(", ")
    ))
}

// 3 ---------------------------------------------------------------------------

fn ema_exactness() -> Outcome {
    let mut worst = 0.0f64;
    for (i, &m) in [0.0, 0.5, 0.9, 0.99].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + i as u64);
        let mut bank =
            SharedTokenBank::new(&["body".to_string()], 3, 5, m, &mut rng).map_err(err)?;
        let v0 = bank.entry("body").map_err(err)?.shared.clone();
        let cur = Tensor::randn(&mut rng, &[3, 5], 1.0);
        bank.entry_mut("body").map_err(err)?.current = cur.clone();
        for t in 1..=200 {
            bank.ema_update("body").map_err(err)?;
            let mt = m.powi(t);
            let shared = &bank.entry("body").map_err(err)?.shared;
            for ((s, a), b) in shared.data().iter().zip(v0.data()).zip(cur.data()) {
                worst = worst.max((s - (mt * a + (1.0 - mt) * b)).abs());
            }
        }
    }
    ensure(worst <= 1e-10, || format!("closed form off by {worst:e}"))?;

    let ds = common::synth(4, 8, 32, 31);
    let mut config = common::small_run(&ds, 40);
    config.model.momentum = 0.9;
    let mut trainer = Trainer::new(config, ds.index.clone()).map_err(err)?;
    let mut replay: BTreeMap<String, Tensor> = trainer
        .model
        .bank
        .entries()
        .iter()
        .map(|(k, e)| (k.clone(), e.shared.clone()))
        .collect();
    let m = trainer.model.bank.momentum();
    let mut updates = 0;
    while !trainer.is_done() {
        let before: BTreeMap<String, u64> = trainer
            .model
            .bank
            .entries()
            .iter()
            .map(|(k, e)| (k.clone(), e.updates))
            .collect();
        trainer.step().map_err(err)?;
        for (k, e) in trainer.model.bank.entries() {
            if e.updates != before[k] {
                let s = replay.get_mut(k).expect("key");
                for (sv, cv) in s.data_mut().iter_mut().zip(e.current.data()) {
                    *sv = m * *sv + (1.0 - m) * cv;
                }
                updates += 1;
            }
        }
    }
    for (k, e) in trainer.model.bank.entries() {
        ensure(e.shared == replay[k], || format!("replay of key {k} differs"))?;
    }
    Ok(format!(
        "closed form max abs err {worst:.1e} over m in {{0, 0.5, 0.9, 0.99}}, t <= 200; replay exact over {updates} key updates"
    ))
}

// 4 ---------------------------------------------------------------------------

fn softmax_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let h = rng.random_range(1..=6);
        let w = rng.random_range(1..=6);
        let k = rng.random_range(2..=6);
        let classes: Vec<u8> = (0..k as u8).collect();
        let data: Vec<f64> = (0..h * w * k).map(|_| rng.random_range(-20.0..20.0)).collect();
        let v = LogitVolume::new(h, w, classes.clone(), data.clone(), Branch::Visual).map_err(err)?;
        let p = softmax_prob(&v);
        for px in 0..h * w {
            worst = worst.max((p.pixel(px).iter().sum::<f64>() - 1.0).abs());
        }
        let mut shifted = data;
        for px in 0..h * w {
            let c: f64 = rng.random_range(-50.0..50.0);
            shifted[px * k..(px + 1) * k].iter_mut().for_each(|x| *x += c);
        }
        let s = LogitVolume::new(h, w, classes, shifted, Branch::Visual).map_err(err)?;
        ensure(s.argmax_labels() == v.argmax_labels(), || "shift changed a prediction".into())?;
        ensure(softmax_prob(&v).argmax_labels() == v.argmax_labels(), || {
            "argmax of probabilities differs from argmax of logits".into()
        })?;
    }
    ensure(worst <= 1e-9, || format!("probability sums off by {worst:e}"))?;
    Ok(format!("100 volumes, max |sum - 1| {worst:.1e}, predictions shift-invariant"))
}

// 5 ---------------------------------------------------------------------------

fn miou_hand_cases() -> Outcome {
    let gt = Mask::new(2, 4, vec![1, 1, 1, 1, 2, 2, 2, 2]).map_err(err)?;
    let same = miou(&gt, &gt, 2).map_err(err)?;
    ensure(same.mean == 1.0, || format!("pred == gt gave {}", same.mean))?;

    let pred = Mask::filled(2, 4, 1);
    let r = miou(&pred, &gt, 2).map_err(err)?;
    let (mut i1, mut u1, mut i2, mut u2) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        i1 += u64::from(p == 1 && g == 1);
        u1 += u64::from(p == 1 || g == 1);
        i2 += u64::from(p == 2 && g == 2);
        u2 += u64::from(p == 2 || g == 2);
    }
    // mean = (i1/u1 + i2/u2) / 2 must equal 1/4: 4·(i1·u2 + i2·u1) == 2·u1·u2.
    ensure(4 * (i1 * u2 + i2 * u1) == 2 * u1 * u2, || "rational check failed".into())?;
    ensure(r.per_class == vec![None, Some(0.5), Some(0.0)], || {
        format!("per-class IoU {:?}", r.per_class)
    })?;
    ensure(r.mean.to_bits() == 0.25f64.to_bits(), || format!("mIoU {} is not 0.25", r.mean))?;

    let disjoint = miou(&Mask::filled(2, 2, 1), &Mask::filled(2, 2, 2), 2).map_err(err)?;
    ensure(disjoint.mean == 0.0, || format!("disjoint gave {}", disjoint.mean))?;
    Ok("identity 1.0, half-overlap 0.25 (bit-exact, rational check), disjoint 0.0".into())
}

// 6 ---------------------------------------------------------------------------

fn degeneracies() -> Outcome {
    let ds = common::synth(4, 10, 32, 61);
    let (split, keys) = partseg_core::trainer::training_split(&common::small_run(&ds, 0), &ds.index)
        .map_err(err)?;
    let base = common::small_model();
    let ppl = PartSegModel::new(
        ModelConfig {
            design: PromptDesign::Ppl,
            n_shared: 0,
            ..base.clone()
        },
        &keys,
        5,
    )
    .map_err(err)?;
    let lpp = PartSegModel::new(
        ModelConfig {
            design: PromptDesign::Lpp,
            ..base.clone()
        },
        &keys,
        5,
    )
    .map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for _ in 0..10 {
        let e = sample_episode(&ds.index, &split, Partition::Base, 1, &mut rng).map_err(err)?;
        for mode in [Mode::Train, Mode::Eval] {
            let mut ta = Tape::new();
            let mut tb = Tape::new();
            let fa = ppl.forward_episode(&mut ta, &e, mode).map_err(err)?;
            let fb = lpp.forward_episode(&mut tb, &e, mode).map_err(err)?;
            let (va, xa) = logit_volumes(&ta, &fa);
            let (vb, xb) = logit_volumes(&tb, &fb);
            let bits = |v: &LogitVolume| v.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            ensure(bits(&va) == bits(&vb), || format!("visual logits differ on {}", e.id))?;
            let (xa, xb) = (xa.expect("textual"), xb.expect("textual"));
            ensure(bits(&xa) == bits(&xb), || format!("textual logits differ on {}", e.id))?;
        }
    }

    let fused = PartSegModel::new(
        ModelConfig {
            alpha: 1.0,
            ..base.clone()
        },
        &keys,
        9,
    )
    .map_err(err)?;
    let proto = PartSegModel::new(
        ModelConfig {
            design: PromptDesign::ProtoNet,
            ..base
        },
        &keys,
        9,
    )
    .map_err(err)?;
    for _ in 0..20 {
        let e = sample_episode(&ds.index, &split, Partition::Novel, 1, &mut rng).map_err(err)?;
        let a = fused.predict(&e).map_err(err)?;
        let b = proto.predict(&e).map_err(err)?;
        ensure(a.labels == b.labels, || format!("alpha = 1 differs from ProtoNet on {}", e.id))?;
    }
    Ok("PPL(n_shared=0) == LPP bitwise on 10 episodes x 2 modes; alpha=1 == ProtoNet on 20 episodes".into())
}

// 7 ---------------------------------------------------------------------------

fn default_dataset() -> common::Dataset {
    common::synth(6, 40, 64, 7)
}

fn frozen_text(ds: &common::Dataset) -> Outcome {
    let config = RunConfig {
        dataset: ds.root(),
        optim: partseg_core::config::OptimConfig {
            max_steps: 500,
            ..Default::default()
        },
        ..RunConfig::default()
    };
    let mut trainer = Trainer::new(config, ds.index.clone()).map_err(err)?;
    let text_before = trainer.model.params.fingerprint("text.");
    let enc_before = trainer.model.params.fingerprint("encoder.");
    trainer.run(|_, _| Ok(())).map_err(err)?;
    let text_after = trainer.model.params.fingerprint("text.");
    ensure(text_before == text_after, || "text encoder parameters changed".into())?;
    ensure(enc_before != trainer.model.params.fingerprint("encoder."), || {
        "visual encoder did not train".into()
    })?;
    Ok(format!("500 steps, text fingerprint {}... unchanged", &text_after[..12]))
}

// 8 ---------------------------------------------------------------------------

fn overfit(ds: &common::Dataset) -> Outcome {
    const THRESHOLD: f64 = 0.05;
    let config = RunConfig {
        dataset: ds.root(),
        overfit_one_episode: true,
        optim: partseg_core::config::OptimConfig {
            max_steps: 1000,
            ..Default::default()
        },
        ..RunConfig::default()
    };
    let mut trainer = Trainer::new(config, ds.index.clone()).map_err(err)?;
    let mut first = None;
    let mut start = None;
    let mut last = f64::NAN;
    trainer
        .run(|_, r| {
            start.get_or_insert(r.loss);
            last = r.loss;
            if r.loss < THRESHOLD && first.is_none() {
                first = Some(r.step);
            }
            Ok(())
        })
        .map_err(err)?;
    let step = first.ok_or_else(|| format!("loss never fell below {THRESHOLD}; final {last:.4}"))?;
    Ok(format!(
        "loss {:.3} -> below {THRESHOLD} at step {step}, final {last:.2e}",
        start.unwrap_or(f64::NAN)
    ))
}

// 9 ---------------------------------------------------------------------------

fn generalization(ds: &common::Dataset) -> Outcome {
    let mut parts = Vec::new();
    let mut failed = false;
    for seed in 0..3 {
        let config = RunConfig {
            dataset: ds.root(),
            seed,
            eval_episodes: 200,
            ..RunConfig::default()
        };
        let mut trainer = Trainer::new(config, ds.index.clone()).map_err(err)?;
        let before = evaluate_run(&trainer).map_err(err)?;
        trainer.run(|_, _| Ok(())).map_err(err)?;
        let after = evaluate_run(&trainer).map_err(err)?;
        ensure(before.episode_ids == after.episode_ids, || "episode streams differ".into())?;
        let gain = after.miou.mean - before.miou.mean;
        failed |= gain < 0.15;
        parts.push(format!(
            "seed {seed}: {:.3} -> {:.3} ({gain:+.3})",
            before.miou.mean, after.miou.mean
        ));
    }
    let line = format!("3000 steps, 200 novel episodes; {}", parts.join("; "));
    if failed {
        Err(line)
    } else {
        Ok(line)
    }
}

// 10 --------------------------------------------------------------------------

fn collect_files(dir: &Path, out: &mut BTreeMap<String, Vec<u8>>, root: &Path) {
    let mut entries: Vec<_> = std::fs::read_dir(dir).expect("readable").flatten().collect();
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(&p, out, root);
        } else {
            let rel = p.strip_prefix(root).expect("prefix").display().to_string();
            out.insert(rel, std::fs::read(&p).expect("readable"));
        }
    }
}

fn harness_fidelity() -> Outcome {
    let ds = common::synth(6, 12, 32, 100);
    let config = common::small_run(&ds, 60);
    let run = |tag: &str| -> std::result::Result<BTreeMap<String, Vec<u8>>, String> {
        let out = ds.dir.path().join(tag);
        let sweep = sweep_m(&config, &DEFAULT_SWEEP, ds.index.clone(), Some(&out.join("sweep")))
            .map_err(err)?;
        ensure(sweep.rows.len() == 4, || "sweep report is incomplete".into())?;
        let ablation = run_ablation(&config, &DEFAULT_ABLATION, ds.index.clone(), Some(&out.join("ablation")))
            .map_err(err)?;
        ensure(ablation.rows.len() == 5, || "ablation report is incomplete".into())?;
        ensure(sweep.episode_ids == ablation.episode_ids && !sweep.episode_ids.is_empty(), || {
            "harnesses saw different evaluation episodes".into()
        })?;
        for s in sweep.rows.iter().map(|r| &r.miou).chain(ablation.rows.iter().map(|r| &r.miou)) {
            ensure(s.mean.is_finite() && s.episodes == config.eval_episodes, || {
                "a report row is incomplete".into()
            })?;
        }
        partseg_core::json::write_pretty(&out.join("sweep_report.json"), &sweep).map_err(err)?;
        partseg_core::json::write_pretty(&out.join("ablation_report.json"), &ablation).map_err(err)?;
        let mut files = BTreeMap::new();
        collect_files(&out, &mut files, &out);
        Ok(files)
    };
    let first = run("first")?;
    let second = run("second")?;
    ensure(first.keys().eq(second.keys()), || "reruns wrote different file sets".into())?;
    for (name, bytes) in &first {
        ensure(second[name] == *bytes, || format!("{name} differs between reruns"))?;
    }
    let metrics = first.keys().filter(|k| k.ends_with("metrics.jsonl")).count();
    Ok(format!(
        "sweep 4 rows + ablation 5 rows on paired streams; {} files ({metrics} metrics logs) identical on rerun",
        first.len()
    ))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let started = Instant::now();
    let (mut run, mut failures) = (0, 0);
    let mut report = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        if !only.is_empty() && !only.contains(&n) {
            return;
        }
        run += 1;
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    };
    report(1, "MAP oracle", &map_oracle);
    report(2, "loss/gradient fidelity", &gradient_fidelity);
    report(3, "EMA exactness", &ema_exactness);
    report(4, "softmax normalization and shift invariance", &softmax_properties);
    report(5, "mIoU hand cases", &miou_hand_cases);
    report(6, "degeneracy equivalences", &degeneracies);
    let ds = std::cell::OnceCell::new();
    let ds = || ds.get_or_init(default_dataset);
    report(7, "frozen text encoder", &|| frozen_text(ds()));
    report(8, "overfit one episode", &|| overfit(ds()));
    report(9, "synthetic generalization", &|| generalization(ds()));
    report(10, "harness fidelity and determinism", &harness_fidelity);
    println!(
        "acceptance: {} of {run} passed in {:.0}s",
        run - failures,
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
