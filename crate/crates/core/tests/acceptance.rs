//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any gating criterion fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cda::autodiff::{grad_check_many, Graph, Tensor};
use cda::config::{RawConfig, RunConfig};
use cda::data::{self, IdxDataset};
use cda::losses;
use cda::metrics;
use cda::nn;
use cda::schedule::{self, ScheduleConfig};
use cda::trainer::{self, Artifacts, EpochRecord};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

fn unit_rows(z: &Tensor) -> Vec<Vec<f64>> {
    (0..z.rows())
        .map(|r| {
            let row = z.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------- criterion 1

fn gradient_correctness() -> Outcome {
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 4];
    for trial in 0..20 {
        let b = rng.random_range(3..8);
        let n = rng.random_range(2..5);
        let d = rng.random_range(2..6);
        let tau = [0.5, 1.0, 0.2][trial % 3];

        let logits = random_matrix(&mut rng, b, n, -2.0, 2.0);
        let y = random_labels(&mut rng, b, n);
        let e = grad_check_many(|g, x| Ok(losses::cross_entropy(g, x[0], &y)?.node), &[logits], EPS).unwrap();
        worst[0] = worst[0].max(e);

        let ds = random_matrix(&mut rng, b, 1, 0.05, 0.95);
        let dt = random_matrix(&mut rng, b + 1, 1, 0.05, 0.95);
        let e1 = grad_check_many(|g, x| Ok(losses::adversarial_loss(g, x[0], x[1])?.node), &[ds, dt], EPS).unwrap();
        let ls = random_matrix(&mut rng, b, 1, -3.0, 3.0);
        let lt = random_matrix(&mut rng, b + 1, 1, -3.0, 3.0);
        let e2 = grad_check_many(
            |g, x| Ok(losses::adversarial_loss_from_logits(g, x[0], x[1])?.node),
            &[ls, lt],
            EPS,
        )
        .unwrap();
        worst[1] = worst[1].max(e1).max(e2);

        // labels cycle so every batch has positive pairs
        let ys: Vec<usize> = (0..b).map(|i| i % n.min(b / 2).max(1)).collect();
        let z = random_matrix(&mut rng, b, d, -1.0, 1.0);
        let e = grad_check_many(
            |g, x| {
                let u = nn::l2_normalize(g, x[0])?;
                Ok(losses::sup_contrastive(g, u, &ys, tau)?.node)
            },
            &[z],
            EPS,
        )
        .unwrap();
        worst[2] = worst[2].max(e);

        let yt: Vec<usize> = (0..b + 1).map(|i| (i + 1) % n).collect();
        let ys: Vec<usize> = (0..b).map(|i| i % n).collect();
        let zs = random_matrix(&mut rng, b, d, -1.0, 1.0);
        let zt = random_matrix(&mut rng, b + 1, d, -1.0, 1.0);
        let e = grad_check_many(
            |g, x| {
                let us = nn::l2_normalize(g, x[0])?;
                let ut = nn::l2_normalize(g, x[1])?;
                Ok(losses::cross_domain_contrastive(g, us, &ys, ut, &yt, tau)?.node)
            },
            &[zs, zt],
            EPS,
        )
        .unwrap();
        worst[3] = worst[3].max(e);
    }
    let pass = worst.iter().all(|&w| w < TOL);
    outcome(
        pass,
        format!(
            "20 batches each, max rel err CE {:.1e}, Adv {:.1e}, SupCL {:.1e}, CrossCL {:.1e} (tol {TOL:.0e})",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

/// Enumerates anchor/positive pairs directly.
fn sup_oracle(z: &[Vec<f64>], y: &[usize], tau: f64) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for a in 0..z.len() {
        for p in 0..z.len() {
            if p == a || y[p] != y[a] {
                continue;
            }
            let num = (dot(&z[a], &z[p]) / tau).exp();
            let mut den = num;
            for k in 0..z.len() {
                if y[k] != y[a] {
                    den += (dot(&z[a], &z[k]) / tau).exp();
                }
            }
            total += -(num / den).ln();
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

fn centroid(z: &[Vec<f64>], y: &[usize], c: usize) -> Option<Vec<f64>> {
    let members: Vec<&Vec<f64>> = z.iter().zip(y).filter(|(_, l)| **l == c).map(|(v, _)| v).collect();
    if members.is_empty() {
        return None;
    }
    let mut m = vec![0.0; z[0].len()];
    for v in &members {
        for (a, b) in m.iter_mut().zip(v.iter()) {
            *a += b / members.len() as f64;
        }
    }
    let n = dot(&m, &m).sqrt();
    Some(m.iter().map(|v| v / n).collect())
}

fn cross_oracle(zs: &[Vec<f64>], ys: &[usize], zt: &[Vec<f64>], yt: &[usize], n: usize, tau: f64) -> Option<f64> {
    let cs: Vec<Option<Vec<f64>>> = (0..n).map(|c| centroid(zs, ys, c)).collect();
    let ct: Vec<Option<Vec<f64>>> = (0..n).map(|c| centroid(zt, yt, c)).collect();
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..n {
        let (Some(si), Some(ti)) = (&cs[i], &ct[i]) else { continue };
        let num = (dot(si, ti) / tau).exp();
        let mut den = num;
        for (k, tk) in ct.iter().enumerate() {
            if let (true, Some(tk)) = (k != i, tk) {
                den += (dot(si, tk) / tau).exp();
            }
        }
        total += -(num / den).ln();
        count += 1;
    }
    (count > 0).then(|| total / count as f64)
}

fn loss_oracles() -> Outcome {
    const TOL: f64 = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst_sup, mut worst_cross, mut mismatches) = (0.0f64, 0.0f64, 0);
    for _ in 0..200 {
        let b = rng.random_range(2..=16);
        let bt = rng.random_range(2..=16);
        let d = rng.random_range(2..=8);
        let n = rng.random_range(2..=4);
        let tau = rng.random_range(0.1..2.0);
        let y = random_labels(&mut rng, b, n);
        let z = random_matrix(&mut rng, b, d, -1.0, 1.0);
        let zu = unit_rows(&z);
        let mut g = Graph::new();
        let id = g.constant(Tensor::from_rows(&zu).unwrap());
        match (losses::sup_contrastive(&mut g, id, &y, tau), sup_oracle(&zu, &y, tau)) {
            (Ok(v), Some(o)) => worst_sup = worst_sup.max((v.value - o).abs()),
            (Err(cda::Error::DegenerateBatch), None) => {}
            _ => mismatches += 1,
        }

        let yt = random_labels(&mut rng, bt, n);
        let zt = unit_rows(&random_matrix(&mut rng, bt, d, -1.0, 1.0));
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&zu).unwrap());
        let t = g.constant(Tensor::from_rows(&zt).unwrap());
        match (
            losses::cross_domain_contrastive(&mut g, s, &y, t, &yt, tau),
            cross_oracle(&zu, &y, &zt, &yt, n, tau),
        ) {
            (Ok(v), Some(o)) => worst_cross = worst_cross.max((v.value - o).abs()),
            (Err(cda::Error::NoCrossDomainAnchors), None) => {}
            _ => mismatches += 1,
        }
    }
    outcome(
        mismatches == 0 && worst_sup < TOL && worst_cross < TOL,
        format!("200 batches, max |diff| SupCL {worst_sup:.1e}, CrossCL {worst_cross:.1e}, {mismatches} error mismatches"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn schedule_exactness() -> Outcome {
    let mut checked = 0;
    let mut failures = Vec::new();
    for (e1, e2, total) in [(25, 35, 90), (40, 60, 200), (15, 25, 60)] {
        let c = ScheduleConfig::new(total, e1, e2);
        for e in 0..=total {
            let lambda = schedule::lambda_at(e, &c).unwrap();
            let beta = schedule::beta_at(e, &c).unwrap();
            let expect_lambda = if e <= e1 {
                0.0
            } else {
                let p = (e - e1) as f64 / (total - e1) as f64;
                2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
            };
            let expect_beta = if e <= e2 {
                0.0
            } else {
                (1.0 * (e - e2) as f64 / e2 as f64).min(1.0)
            };
            if lambda != expect_lambda || beta != expect_beta {
                failures.push(format!("({e1},{e2},{total}) e={e}: λ={lambda} β={beta}"));
            }
            checked += 1;
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{checked} epochs over 3 configs, {} mismatches{}",
            failures.len(),
            failures.first().map(|f| format!(", first {f}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn grl_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let x = random_matrix(&mut rng, 4, 3, -5.0, 5.0);
    let w = random_matrix(&mut rng, 4, 3, -2.0, 2.0);
    let mut ok = true;
    for lambda in [0.0, 0.5, 1.0] {
        let mut g = Graph::new();
        let xi = g.param(x.clone());
        let r = g.gradient_reversal(xi, lambda).unwrap();
        let forward_same = g
            .value(r)
            .data()
            .iter()
            .zip(x.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        let wi = g.constant(w.clone());
        let prod = g.mul(r, wi).unwrap();
        let loss = g.sum(prod);
        let grad = g.backward(loss).unwrap().get(xi);
        let backward_exact = grad.data().iter().zip(w.data()).all(|(gv, wv)| *gv == -lambda * wv);
        ok &= forward_same && backward_exact;
    }
    outcome(ok, "λ ∈ {0, 0.5, 1}: forward bit-identical, backward = -λ·upstream exactly")
}

// ---------------------------------------------------------------- criterion 5

fn load_config(path: &Path, overrides: &[String]) -> RunConfig {
    let mut raw = RawConfig::from_file(path).unwrap();
    for o in overrides {
        raw.apply_override(o).unwrap();
    }
    RunConfig::from_raw(&raw).unwrap()
}

fn run(cfg: &RunConfig, artifacts: Option<&Artifacts>) -> cda::Result<Vec<EpochRecord>> {
    let (s, t) = cfg.build_datasets()?;
    let model = cfg.init_model(s.in_dim(), s.num_classes())?;
    Ok(trainer::train(&cfg.train, model, &s, &t, artifacts)?.history)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

fn desk_scale_adaptation() -> Outcome {
    let start = Instant::now();
    let path = configs_dir().join("twomoons_cda.cfg");
    let modes: [(&str, &[&str]); 3] = [
        ("cda", &[]),
        ("dann", &["contrastive_enabled=false"]),
        ("source_only", &["contrastive_enabled=false", "adversarial_enabled=false"]),
    ];
    let mut finals = vec![Vec::new(); 3];
    let mut pseudo_rising = 0;
    for seed in 1..=5u64 {
        for (m, (_, extra)) in modes.iter().enumerate() {
            let mut ov = vec![format!("seed={seed}"), format!("data_seed={seed}"), "checkpoint_every=0".into()];
            ov.extend(extra.iter().map(|s| s.to_string()));
            let cfg = load_config(&path, &ov);
            let h = run(&cfg, None).unwrap();
            finals[m].push(h.last().unwrap().tgt_acc.unwrap());
            if m == 0 {
                let p: Vec<f64> = h.iter().filter_map(|r| r.pseudo_acc).collect();
                pseudo_rising += usize::from(p.len() >= 2 && p[p.len() - 1] > p[0]);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (c, d, s) = (median(&finals[0]), median(&finals[1]), median(&finals[2]));
    let wins = finals[0].iter().zip(&finals[1]).filter(|(a, b)| a >= b).count();
    let pass = c >= d && d >= s && c - s >= 0.05 && secs < 300.0;
    outcome(
        pass,
        format!(
            "median target acc CDA {c:.3} >= DANN {d:.3} >= source-only {s:.3}, gap {:+.1} pts, CDA>=DANN on {wins}/5 seeds, pseudo-label acc rising on {pseudo_rising}/5 seeds, {secs:.0}s; per seed CDA {:.3?} DANN {:.3?} source-only {:.3?}",
            100.0 * (c - s),
            finals[0],
            finals[1],
            finals[2]
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn write_digit_fixture(dir: &Path) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut files = Vec::new();
    for (name, n) in [("train", 200usize), ("test", 200)] {
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        // each class lights up a different pixel block
        let mut px = Vec::with_capacity(n * 16);
        for &l in &labels {
            for k in 0..16 {
                let base = if k == l || k == l + 6 { 0.8 } else { 0.1 };
                px.push(((base + rng.random_range(0.0..0.2)) * 255.0f64).round() / 255.0);
            }
        }
        let x = Tensor::matrix(n, 16, px).unwrap();
        let img = dir.join(format!("{name}-images"));
        let lab = dir.join(format!("{name}-labels"));
        data::write_idx_images(&img, 4, 4, &x).unwrap();
        data::write_idx_labels(&lab, &labels).unwrap();
        files.push(img.display().to_string());
        files.push(lab.display().to_string());
    }
    files
}

fn stage_gating() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let fx = write_digit_fixture(tmp.path());
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("twomoons_cda.cfg", vec!["n_source=200".into(), "n_target=200".into()]),
        (
            "digits_cda.cfg",
            vec![
                format!("source_images={}", fx[0]),
                format!("source_labels={}", fx[1]),
                format!("target_images={}", fx[2]),
                format!("target_labels={}", fx[3]),
                "limit=200".into(),
            ],
        ),
    ];
    let mut details = Vec::new();
    let mut pass = true;
    for (name, mut ov) in runs {
        let out = tmp.path().join(name);
        std::fs::create_dir_all(&out).unwrap();
        ov.push("checkpoint_every=0".into());
        let cfg = load_config(&configs_dir().join(name), &ov);
        let art = Artifacts {
            dir: out.clone(),
            config_hash: cfg.hash(),
        };
        run(&cfg, Some(&art)).unwrap();
        let hist = metrics::read_history(&art.history_path()).unwrap();
        let e2 = cfg.train.schedule.crosscl_start;
        let bad_sup = hist.iter().filter(|r| r.epoch >= e2 && r.l_supcl != 0.0).count();
        let bad_cross = hist.iter().filter(|r| r.epoch <= e2 && r.l_crosscl != 0.0).count();
        let active = hist.iter().filter(|r| r.l_crosscl != 0.0).count();
        pass &= bad_sup == 0 && bad_cross == 0 && hist.len() == cfg.train.schedule.epochs && active > 0;
        details.push(format!("{name}: {} rows, violations {}/{}, crosscl active {active}", hist.len(), bad_sup, bad_cross));
    }
    outcome(pass, details.join("; "))
}

// ---------------------------------------------------------------- criterion 7

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("twomoons_cda.cfg");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_cda"))
            .arg("train")
            .arg("--config")
            .arg(&cfg)
            .arg("--override")
            .arg(format!("out_dir={}", dir.display()))
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(false, format!("cda train failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        outputs.push((
            std::fs::read(dir.join("history.csv")).unwrap(),
            std::fs::read(dir.join("model_final.ckpt")).unwrap(),
        ));
    }
    let same_hist = outputs[0].0 == outputs[1].0;
    let same_ckpt = outputs[0].1 == outputs[1].1;
    outcome(
        same_hist && same_ckpt,
        format!(
            "history identical: {same_hist} ({} bytes), final checkpoint identical: {same_ckpt} ({} bytes)",
            outputs[0].0.len(),
            outputs[0].1.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn idx_loader() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (img, lab) = (tmp.path().join("img"), tmp.path().join("lab"));
    let px: Vec<f64> = (0..3 * 6).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
    let x = Tensor::matrix(3, 6, px).unwrap();
    let labels = vec![2, 0, 1];
    data::write_idx_images(&img, 2, 3, &x).unwrap();
    data::write_idx_labels(&lab, &labels).unwrap();
    let round_trip = match data::load_idx(&img, Some(&lab), 10).unwrap() {
        IdxDataset::Labeled(ds) => ds.x() == &x && ds.y() == labels.as_slice(),
        IdxDataset::Unlabeled(_) => false,
    };

    let good = std::fs::read(&img).unwrap();
    let mut rejected = 0;
    let mut cases = Vec::new();
    let mut bad_magic = good.clone();
    bad_magic[2] = 0x09;
    cases.push(bad_magic);
    let mut bad_dims = good.clone();
    bad_dims[15] = 9; // cols = 9 no longer matches the payload
    cases.push(bad_dims);
    cases.push(good[..10].to_vec());
    let mut trailing = good.clone();
    trailing.push(0);
    cases.push(trailing);
    for c in &cases {
        if data::parse_idx_images(c, 10).is_err() {
            rejected += 1;
        }
    }
    let short_labels = tmp.path().join("short");
    data::write_idx_labels(&short_labels, &[0, 1]).unwrap();
    let count_mismatch = data::load_idx(&img, Some(&short_labels), 10).is_err();
    outcome(
        round_trip && rejected == cases.len() && count_mismatch,
        format!(
            "round-trip equal: {round_trip}; corrupted headers rejected {rejected}/{}; count mismatch rejected: {count_mismatch}",
            cases.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn real_digits() -> Option<Outcome> {
    let dir = PathBuf::from(std::env::var_os("CDA_MNIST_DIR")?);
    let start = Instant::now();
    let f = |n: &str| dir.join(n).display().to_string();
    let base = vec![
        format!("source_images={}", f("train-images-idx3-ubyte")),
        format!("source_labels={}", f("train-labels-idx1-ubyte")),
        format!("target_images={}", f("t10k-images-idx3-ubyte")),
        format!("target_labels={}", f("t10k-labels-idx1-ubyte")),
        "checkpoint_every=0".into(),
    ];
    let mut gaps = Vec::new();
    for seed in 1..=3 {
        let mut accs = Vec::new();
        for extra in [vec![], vec!["contrastive_enabled=false", "adversarial_enabled=false"]] {
            let mut ov = base.clone();
            ov.push(format!("seed={seed}"));
            ov.extend(extra.iter().map(|s| s.to_string()));
            let cfg = load_config(&configs_dir().join("digits_cda.cfg"), &ov);
            accs.push(run(&cfg, None).unwrap().last().unwrap().tgt_acc.unwrap());
        }
        gaps.push(accs[0] - accs[1]);
    }
    let secs = start.elapsed().as_secs_f64();
    Some(outcome(
        gaps.iter().all(|g| *g >= 0.05) && secs < 1200.0,
        format!("CDA - source-only per seed {gaps:.3?}, {secs:.0}s"),
    ))
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient correctness", gradient_correctness),
        ("loss oracles", loss_oracles),
        ("schedule exactness", schedule_exactness),
        ("GRL contract", grl_contract),
        ("desk-scale adaptation", desk_scale_adaptation),
        ("stage gating", stage_gating),
        ("determinism", determinism),
        ("IDX loader", idx_loader),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = f();
        failed += usize::from(!o.pass);
        println!(
            "acceptance {} {} [{name}] {} ({:.1}s)",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    match real_digits() {
        Some(o) => println!(
            "acceptance 9 {} [real digits, optional] {}",
            if o.pass { "PASS" } else { "FAIL (not gating)" },
            o.detail
        ),
        None => println!("acceptance 9 SKIP [real digits, optional] set CDA_MNIST_DIR to the MNIST IDX directory to run"),
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} gating criteria failed");
        ExitCode::FAILURE
    }
}
