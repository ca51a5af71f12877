//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! The five arms are trained once at desk scale through the CLI (about half
//! an hour on one core); later criteria reuse that run's checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vitlm::analysis::{
    amplification_identity_check, feature_map, frequency_activation, iou, magnitude_activation, miou_from_traces,
    trace_samples, MapKind, THRESHOLDS,
};
use vitlm::blocks::{multi_head_attention, Activation, BlockWeights, Init, Variant};
use vitlm::checks::{gradient_suite, worst, STEP, TOLERANCE};
use vitlm::data::{to_token_mask, Dataset, TokenMask};
use vitlm::io::{load_checkpoint, mock_llm, save_checkpoint, TensorContainer};
use vitlm::model::{Arm, Model, ModelConfig, TraceBundle, TracePoint};
use vitlm::trainer::{cross_entropy, label_smoothing_ce};
use vitlm::{no_grad, Real, Tensor};

const BIN: &str = env!("CARGO_BIN_EXE_vitlm");
const MOCK: &str = "mock:seed=7";

type Check = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn vitlm(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN).args(args).output().map_err(err)?;
    if !out.status.success() {
        return Err(format!(
            "vitlm {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    String::from_utf8(out.stdout).map_err(err)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn kv_lines(stdout: &str) -> BTreeMap<String, String> {
    stdout
        .lines()
        .filter_map(|l| l.split_once('=').filter(|(k, _)| !k.contains(' ')))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// `report.csv` as rows of named floats.
fn read_report(path: &Path) -> Result<Vec<BTreeMap<String, f64>>, String> {
    let text = fs::read_to_string(path).map_err(err)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty report")?.split(',').collect();
    lines
        .map(|l| {
            header
                .iter()
                .zip(l.split(','))
                .map(|(h, v)| v.parse::<f64>().map(|x| (h.to_string(), x)).map_err(err))
                .collect()
        })
        .collect()
}

struct ArmRun {
    arm: Arm,
    elapsed: Duration,
    stdout: BTreeMap<String, String>,
    report: Vec<BTreeMap<String, f64>>,
    dir: PathBuf,
}

struct Desk {
    data_dir: PathBuf,
    data: Dataset,
    runs: Vec<ArmRun>,
}

impl Desk {
    fn run(&self, arm: Arm) -> Option<&ArmRun> {
        self.runs.iter().find(|r| r.arm == arm)
    }

    fn model(&self, arm: Arm) -> Result<Model<f32>, String> {
        let r = self.run(arm).ok_or(format!("{arm} did not train"))?;
        load_checkpoint(&r.dir.join("final")).map_err(err)
    }
}

/// Default dataset, every arm for 20 epochs with the default settings.
fn desk_run(root: &Path) -> Result<Desk, String> {
    let data_dir = root.join("data");
    vitlm(&["gen-data", "--out", s(&data_dir)])?;
    let data = Dataset::load(&data_dir).map_err(err)?;
    let mut runs = Vec::new();
    for arm in Arm::ALL {
        let dir = root.join(arm.name());
        let t0 = Instant::now();
        let stdout = vitlm(&["train", "--arm", arm.name(), "--data", s(&data_dir), "--out", s(&dir), "--llm-weights", MOCK]);
        let elapsed = t0.elapsed();
        match stdout {
            Ok(out) => {
                let report = read_report(&dir.join("report.csv"))?;
                let last = report.last().cloned().unwrap_or_default();
                eprintln!(
                    "  trained {arm:<16} {:>6.1}s  val_top1 {:.4}",
                    elapsed.as_secs_f64(),
                    last.get("val_top1").copied().unwrap_or(f64::NAN)
                );
                runs.push(ArmRun { arm, elapsed, stdout: kv_lines(&out), report, dir });
            }
            Err(e) => eprintln!("  {arm} failed: {e}"),
        }
    }
    Ok(Desk { data_dir, data, runs })
}

fn ac1() -> Check {
    let t0 = Instant::now();
    let mut worst_seen = (0.0f64, String::new());
    let mut kernels = 0;
    for seed in 0..5 {
        let entries = gradient_suite(seed).map_err(err)?;
        kernels = entries.len();
        let w = worst(&entries).ok_or("empty suite")?;
        if w.result.max_rel_error > worst_seen.0 {
            worst_seen = (w.result.max_rel_error, format!("{} seed {seed}", w.name));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        worst_seen.0 < TOLERANCE && secs < 60.0,
        format!(
            "{kernels} checks × 5 seeds at step {STEP:e}; worst {:.3e} ({}); {secs:.1}s",
            worst_seen.0, worst_seen.1
        ),
    ))
}

fn ac2(desk: &Desk) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for arm in [Arm::PlusLlm, Arm::PlusRandomLlm, Arm::PlusMlp] {
        let Some(r) = desk.run(arm) else {
            ok = false;
            parts.push(format!("{arm}: no run"));
            continue;
        };
        let (b, a) = (r.stdout.get("frozen_checksum_before"), r.stdout.get("frozen_checksum_after"));
        let epochs = r.report.len();
        let same = b.is_some() && b == a;
        ok &= same && epochs == 20;
        parts.push(format!(
            "{arm}: {} frozen, {epochs} epochs, {}",
            r.stdout.get("frozen_parameters").map(String::as_str).unwrap_or("?"),
            if same { "unchanged" } else { "CHANGED" }
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn ac3(desk: &Desk) -> Check {
    let mut models: Vec<(String, Model<f32>)> = Vec::new();
    let c = ModelConfig::default().with_arm(Arm::PlusLlm);
    let fresh = Model::build(&c, Some(mock_llm(7, c.llm_dim, c.llm_heads, c.llm_ffn_hidden, c.llm_variant, 1).map_err(err)?), 3)
        .map_err(err)?;
    models.push(("init".into(), fresh));
    for arm in [Arm::PlusLlm, Arm::PlusMlp, Arm::PlusLlmFt] {
        if let Ok(m) = desk.model(arm) {
            models.push((format!("trained {arm}"), m));
        }
    }
    let mut nonzero_visual = 0usize;
    let mut cls_live = true;
    for (_, m) in &models {
        for sample in desk.data.val.iter().take(4) {
            let (logits, trace) = m.forward_traced(&sample.image).map_err(err)?;
            label_smoothing_ce(&logits, &[sample.label], 0.1).map_err(err)?.backward().map_err(err)?;
            let z = trace.z_l2.as_ref().ok_or("no stage output traced")?;
            let g = z.grad().ok_or("stage output received no gradient")?;
            let d = z.shape()[1];
            cls_live &= g[..d].iter().any(|&v| v != 0.0);
            nonzero_visual += g[d..].iter().filter(|&&v| v != 0.0).count();
            m.zero_grad();
        }
    }
    Ok((
        nonzero_visual == 0 && cls_live && models.len() == 4,
        format!(
            "{} models × 4 images: {nonzero_visual} nonzero visual-row entries, CLS row gradient {}",
            models.len(),
            if cls_live { "nonzero" } else { "MISSING" }
        ),
    ))
}

fn random_image<T: Real>(g: &mut ChaCha8Rng, c: &ModelConfig) -> Tensor<T> {
    let n = c.channels * c.image_size * c.image_size;
    Tensor::new(&[c.channels, c.image_size, c.image_size], (0..n).map(|_| T::of(g.random_range(0.0..1.0))).collect())
        .expect("image shape")
}

fn ac4(desk: &Desk) -> Check {
    let c = ModelConfig::default().with_arm(Arm::PlusLlm);
    let e = c.encoder_dim;
    let mut g = ChaCha8Rng::seed_from_u64(44);
    let mut worst_res = 0.0f64;
    for trial in 0..20u64 {
        let src = mock_llm::<f64>(trial, c.llm_dim, c.llm_heads, c.llm_ffn_hidden, c.llm_variant, 1).map_err(err)?;
        let m = Model::<f64>::build(&c, Some(src), trial).map_err(err)?;
        // Alternate between arbitrary maps and the collapsed stage of the model.
        let lin = if trial % 2 == 0 {
            let map = Tensor::new(&[e, e], (0..e * e).map(|_| g.random_range(-0.5..0.5)).collect()).map_err(err)?;
            m.with_linear_stage(map).map_err(err)?
        } else {
            m.linearized_stage().map_err(err)?
        };
        worst_res = worst_res.max(amplification_identity_check(&lin, &random_image(&mut g, &c)).map_err(err)?);
    }
    let trained = match desk.model(Arm::PlusLlm).and_then(|m| m.linearized_stage().map_err(err)) {
        Ok(lin) => {
            let mut w = 0.0f64;
            for sample in desk.data.val.iter().take(20) {
                w = w.max(amplification_identity_check(&lin, &sample.image).map_err(err)?);
            }
            format!("; trained plus_llm collapsed, 20 val images: {w:.2e}")
        }
        Err(e) => format!("; trained plus_llm unavailable ({e})"),
    };
    Ok((worst_res < 1e-5, format!("20 linear stages: max residual {worst_res:.2e}{trained}")))
}

fn ac5(root: &Path) -> Check {
    let c = ModelConfig::default();
    let count = |arm: Arm| -> Result<usize, String> {
        let c = c.clone().with_arm(arm);
        let src = arm
            .needs_llm_source()
            .then(|| mock_llm(7, c.llm_dim, c.llm_heads, c.llm_ffn_hidden, c.llm_variant, 1))
            .transpose()
            .map_err(err)?;
        Ok(Model::<f32>::build(&c, src, 0).map_err(err)?.trainable_count())
    };
    let (mlp, llm) = (count(Arm::PlusMlp)?, count(Arm::PlusLlm)?);

    let data = root.join("ab_data");
    vitlm(&["gen-data", "--n", "40", "--classes", "3", "--size", "8", "--out", s(&data)])?;
    let cfg = root.join("ab.cfg");
    fs::write(&cfg, "encoder_dim=8\nencoder_depth=1\nencoder_heads=2\nencoder_mlp_hidden=16\nllm_dim=8\nllm_heads=2\nllm_ffn_hidden=16\nepochs=1\nwarmup_epochs=0\nbatch_size=8\n")
        .map_err(err)?;
    let out = root.join("ab");
    vitlm(&["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--llm-weights", MOCK])?;
    let table = fs::read_to_string(out.join("ablation.csv")).map_err(err)?;
    let rows = table.lines().count() - 1;
    Ok((
        mlp - llm == 2 * c.llm_dim && rows == 5,
        format!("plus_mlp {mlp} − plus_llm {llm} = {} (2·llm_dim = {}); ablate rows {rows}", mlp - llm, 2 * c.llm_dim),
    ))
}

fn ac6(desk: &Desk) -> Check {
    let top1 = |r: &ArmRun| r.report.last().and_then(|row| row.get("val_top1").copied()).unwrap_or(f64::NAN);
    let base = desk.run(Arm::Baseline).ok_or("baseline did not train")?;
    let b = top1(base);
    let mut ok = b >= 0.95 && base.elapsed < Duration::from_secs(600) && base.report.len() == 20;
    let mut parts = vec![format!(
        "{} train / {} val; baseline {:.1}% in {:.0}s",
        desk.data.train.len(),
        desk.data.val.len(),
        100.0 * b,
        base.elapsed.as_secs_f64()
    )];
    for arm in &Arm::ALL[1..] {
        match desk.run(*arm) {
            Some(r) => {
                let t = top1(r);
                ok &= t >= b - 0.05;
                parts.push(format!("{arm} {:.1}% ({:.0}s)", 100.0 * t, r.elapsed.as_secs_f64()));
            }
            None => {
                ok = false;
                parts.push(format!("{arm} failed"));
            }
        }
    }
    Ok((ok && desk.data.train.len() == 2000 && desk.data.val.len() == 500, parts.join(", ")))
}

fn ac7(desk: &Desk) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for arm in [Arm::PlusLlm, Arm::PlusLlmFt] {
        let r = desk.run(arm).ok_or(format!("{arm} did not train"))?;
        let finite = r.report.iter().all(|row| {
            ["train_loss", "val_loss"].iter().all(|k| row.get(*k).is_some_and(|v| v.is_finite()))
        });
        ok &= finite && r.report.len() == 20;
        let (first, last) = (&r.report[0], r.report.last().expect("nonempty"));
        parts.push(format!(
            "{arm} train {:.3}→{:.3} val {:.3}→{:.3}",
            first["train_loss"], last["train_loss"], first["val_loss"], last["val_loss"]
        ));
    }
    // The two loss definitions on the same probe batch.
    let m = desk.model(Arm::PlusLlm)?;
    let probe: Vec<_> = desk.data.val.iter().take(16).collect();
    let images = vitlm::data::stack_images(&probe, None).map_err(err)?;
    let labels: Vec<usize> = probe.iter().map(|s| s.label).collect();
    let logits = no_grad(|| m.forward_batch(&images)).map_err(err)?;
    let smoothed = label_smoothing_ce(&logits, &labels, 0.1).map_err(err)?.item();
    let plain = cross_entropy(&logits, &labels).map_err(err)?.item();
    ok &= smoothed != plain;
    parts.push(format!("probe: smoothed {smoothed:.4} vs plain {plain:.4}"));
    Ok((ok, parts.join("; ")))
}

fn oracle_trace(mask: &TokenMask) -> TraceBundle<f64> {
    let n = mask.cells.len();
    let mut data = vec![0.0; (n + 1) * n];
    for (v, &on) in mask.cells.iter().enumerate() {
        if on == 1 {
            data[(v + 1) * n + v] = 1.0;
        }
    }
    let z = Tensor::new(&[n + 1, n], data).expect("oracle shape");
    TraceBundle {
        z_encoder: z.clone(),
        z_l1: Some(z.clone()),
        z_attn: Some(z.clone()),
        z_ffn: Some(z.clone()),
        z_l2: Some(z),
        cls_final: vec![0.0; n],
        w: vec![1.0 / n as f64; n],
        per_head_w: vec![vec![1.0 / n as f64; n]],
        grid: mask.rows,
    }
}

fn ac8(desk: &Desk, root: &Path) -> Check {
    let mut mismatches = 0;
    for a in 0..16u8 {
        for b in 0..16u8 {
            let m = |bits: u8| TokenMask::new(2, 2, (0..4).map(|i| (bits >> i) & 1).collect()).expect("2×2");
            let (g, p) = (m(a), m(b));
            let inter = (a & b).count_ones() as f64;
            let union = (a | b).count_ones() as f64;
            let want = if union == 0.0 { 1.0 } else { inter / union };
            mismatches += (iou(&g, &p).map_err(err)? != want) as usize;
        }
    }
    let sweep_ok = THRESHOLDS == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

    // Oracle: features that single out the ground-truth tokens of real masks.
    let masks: Vec<TokenMask> = desk
        .data
        .val
        .iter()
        .take(50)
        .map(|s| to_token_mask(&s.mask, desk.data.image_size, desk.data.image_size, 4))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let traces: Vec<_> = masks.iter().map(oracle_trace).collect();
    let oracle = miou_from_traces(&traces, &masks, TracePoint::L2, MapKind::Magnitude).map_err(err)?;

    let ckpt = desk.run(Arm::PlusLlm).ok_or("plus_llm did not train")?.dir.join("final");
    let out = root.join("analysis");
    let stdout = vitlm(&["analyze", "--checkpoint", s(&ckpt), "--data", s(&desk.data_dir), "--out", s(&out)])?;
    let kv = kv_lines(&stdout);
    let f: f64 = kv.get("feature_miou").ok_or("no feature_miou")?.parse().map_err(err)?;
    let a: f64 = kv.get("attention_miou").ok_or("no attention_miou")?.parse().map_err(err)?;
    let sweep = fs::read_to_string(out.join("sweep.csv")).map_err(err)?;
    let emitted = out.join("miou.csv").exists() && out.join("attention_miou.csv").exists() && sweep.lines().count() == 11;
    for l in sweep.lines().skip(1) {
        eprintln!("  sweep {l}");
    }
    Ok((
        mismatches == 0 && sweep_ok && oracle.feature_miou() == 1.0 && emitted,
        format!(
            "2×2 oracle mismatches {mismatches}; oracle model feature mIoU {:.3}; trained plus_llm l2/magnitude: \
             feature {f:.4} vs attention {a:.4} (gap {:+.4})",
            oracle.feature_miou(),
            f - a
        ),
    ))
}

fn ac9(desk: &Desk) -> Check {
    let mut g = ChaCha8Rng::seed_from_u64(9);
    let mut worst_inv = 0.0f64;
    for _ in 0..20 {
        let x = Tensor::<f64>::new(&[64, 64], (0..64 * 64).map(|_| g.random_range(-3.0..3.0)).collect()).map_err(err)?;
        let shift = Tensor::new(&[64], (0..64).map(|_| g.random_range(-10.0..10.0)).collect()).map_err(err)?;
        let base = magnitude_activation(&x).map_err(err)?;
        for other in [x.add_broadcast(&shift).map_err(err)?, x.scale(g.random_range(0.01..100.0))] {
            let m = magnitude_activation(&other).map_err(err)?;
            for (a, b) in base.values.iter().zip(&m.values) {
                worst_inv = worst_inv.max((a - b).abs());
            }
        }
    }
    let same = Tensor::<f64>::new(&[64, 64], (0..64 * 64).map(|i| ((i % 64) as f64).sin()).collect()).map_err(err)?;
    let flat = frequency_activation(&same).map_err(err)?.values.iter().all(|&v| v == 0.0);

    let mut maps = 0usize;
    let mut out_of_range = 0usize;
    let m = desk.model(Arm::PlusLlm)?;
    for t in trace_samples(&m, &desk.data.val[..32]).map_err(err)? {
        for p in t.available() {
            for kind in [MapKind::Magnitude, MapKind::Frequency, MapKind::Attention] {
                let map = feature_map(&t, p, kind).map_err(err)?;
                maps += 1;
                out_of_range += map.values.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
            }
        }
    }
    Ok((
        worst_inv <= 1e-6 && flat && out_of_range == 0,
        format!(
            "shift/scale max deviation {worst_inv:.1e}; identical-token frequency map {}; {maps} trained maps, \
             {out_of_range} values outside [0,1]",
            if flat { "all zero" } else { "NONZERO" }
        ),
    ))
}

fn ac10() -> Check {
    let mut g = ChaCha8Rng::seed_from_u64(10);
    let mut worst_row = 0.0f64;
    let mut worst_perm = 0.0f64;
    for variant in [Variant::Llama, Variant::Opt, Variant::Vit] {
        for _ in 0..5 {
            let w = BlockWeights::<f64>::random(variant, 32, 4, 64, Init::ScaledNormal, &mut g).map_err(err)?;
            let t = 17;
            let x = Tensor::new(&[t, 32], (0..t * 32).map(|_| g.random_range(-2.0..2.0)).collect()).map_err(err)?;
            let (y, scores) = multi_head_attention(&x, &w, None).map_err(err)?;
            for row in scores.data().chunks(t) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
            let mut perm: Vec<usize> = (0..t).collect();
            for i in (1..t).rev() {
                perm.swap(i, g.random_range(0..=i));
            }
            let (yp, _) = multi_head_attention(&x.gather_rows(&perm).map_err(err)?, &w, None).map_err(err)?;
            let want = y.gather_rows(&perm).map_err(err)?;
            for (a, b) in yp.data().iter().zip(want.data()) {
                worst_perm = worst_perm.max((a - b).abs());
            }
        }
    }
    // Padding: three tokens, identity projections, middle key padded.
    let pad = BlockWeights::<f64>::from_fields(Variant::Llama, 1, Activation::Gelu, |name| {
        Some(match name {
            "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => Tensor::eye(2),
            "ffn.gate" | "ffn.up" => Tensor::zeros(&[2, 4]),
            "ffn.down" => Tensor::zeros(&[4, 2]),
            _ => Tensor::full(&[2], 1.0),
        })
    })
    .map_err(err)?;
    let x = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).map_err(err)?;
    let (_, p) = multi_head_attention(&x, &pad, Some(&[true, false, true])).map_err(err)?;
    let r = 1.0 / 2f64.sqrt();
    // Logits against the two live keys: query 0 → (r, r), query 1 → (0, r),
    // query 2 → (r, 2r).
    let pair = |a: f64, b: f64| (a.exp() / (a.exp() + b.exp()), b.exp() / (a.exp() + b.exp()));
    let (q0, q1, q2) = (pair(r, r), pair(0.0, r), pair(r, 2.0 * r));
    let want = [q0.0, 0.0, q0.1, q1.0, 0.0, q1.1, q2.0, 0.0, q2.1];
    let pad_err = p.data().iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((
        worst_row < 1e-5 && worst_perm < 1e-5 && pad_err < 1e-12,
        format!("row-sum error {worst_row:.1e}; permutation error {worst_perm:.1e}; padding example error {pad_err:.1e}"),
    ))
}

fn ac11(desk: &Desk, root: &Path) -> Check {
    let mut parts = Vec::new();
    let mut ok = true;

    // Container bytes survive a decode/encode cycle.
    let ckpt = desk.run(Arm::PlusLlm).ok_or("plus_llm did not train")?.dir.join("final");
    let mut files = vec![ckpt.join("model.fvtw"), desk.data_dir.join("train.fvtw"), desk.data_dir.join("val.fvtw")];
    files.retain(|f| f.exists());
    for f in &files {
        let bytes = fs::read(f).map_err(err)?;
        ok &= TensorContainer::from_bytes(&bytes).map_err(err)?.to_bytes() == bytes;
    }
    parts.push(format!("{} containers byte-exact", files.len()));

    // Checkpoint restore: logits of every trained arm, saved again and reloaded.
    let mut restored = 0;
    for r in &desk.runs {
        let m = load_checkpoint(&r.dir.join("final")).map_err(err)?;
        let again = root.join(format!("resave_{}", r.arm));
        save_checkpoint(&m, &again).map_err(err)?;
        let back = load_checkpoint(&again).map_err(err)?;
        let same_files = fs::read(again.join("model.fvtw")).map_err(err)? == fs::read(r.dir.join("final/model.fvtw")).map_err(err)?;
        for sample in desk.data.val.iter().take(8) {
            ok &= no_grad(|| -> vitlm::Result<bool> {
                Ok(back.forward(&sample.image)?.data() == m.forward(&sample.image)?.data())
            })
            .map_err(err)?;
        }
        ok &= same_files;
        restored += 1;
    }
    parts.push(format!("{restored} checkpoints restore bitwise"));

    // Each subcommand twice with identical flags.
    let cfg = root.join("ab.cfg");
    let twice = |tag: &str, args: &dyn Fn(&Path) -> Vec<String>| -> Result<bool, String> {
        let mut outs = Vec::new();
        for run in ["x", "y"] {
            let dir = root.join(format!("repro_{tag}_{run}"));
            let a = args(&dir);
            let refs: Vec<&str> = a.iter().map(String::as_str).collect();
            let stdout = vitlm(&refs)?;
            outs.push((stdout, snapshot(&dir)));
        }
        Ok(outs[0] == outs[1])
    };
    let data = root.join("ab_data");
    let mut repro = Vec::new();
    let gen = twice("gen", &|d| vec!["gen-data".into(), "--n".into(), "64".into(), "--out".into(), s(d).into()])?;
    repro.push(("gen-data", gen));
    let common = |sub: &str, d: &Path| -> Vec<String> {
        let mut v: Vec<String> = vec![sub.into(), "--config".into(), s(&cfg).into(), "--data".into(), s(&data).into()];
        v.extend(["--out".into(), s(d).into(), "--llm-weights".into(), MOCK.into()]);
        v
    };
    let train = twice("train", &|d| {
        let mut v = common("train", d);
        v.extend(["--arm".into(), "plus_llm".into()]);
        v
    })?;
    repro.push(("train", train));
    repro.push(("ablate", twice("ablate", &|d| common("ablate", d))?));
    let analyze = twice("analyze", &|d| {
        vec![
            "analyze".into(),
            "--checkpoint".into(),
            s(&root.join("ab/plus_llm/final")).into(),
            "--data".into(),
            s(&data).into(),
            "--out".into(),
            s(d).into(),
        ]
    })?;
    repro.push(("analyze", analyze));
    let gc = vitlm(&["gradcheck", "--seed", "2"])? == vitlm(&["gradcheck", "--seed", "2"])?;
    repro.push(("gradcheck", gc));
    for (name, same) in &repro {
        ok &= same;
        if !same {
            parts.push(format!("{name} NOT reproducible"));
        }
    }
    parts.push(format!("{} subcommands reproducible", repro.iter().filter(|(_, s)| *s).count()));
    Ok((ok, parts.join("; ")))
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for e in entries.flatten() {
            let path = e.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Ok(bytes) = fs::read(&path) {
                out.push((path.strip_prefix(dir).unwrap_or(&path).to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut results: Vec<(&str, Check)> = Vec::new();

    eprintln!("gradient suite…");
    results.push(("AC1 gradient suite", ac1()));
    eprintln!("training all arms at desk scale (this takes a while)…");
    let desk = match desk_run(root) {
        Ok(d) => d,
        Err(e) => {
            println!("FAIL desk-scale run could not start: {e}");
            return ExitCode::FAILURE;
        }
    };
    results.push(("AC2 freeze invariant", ac2(&desk)));
    results.push(("AC3 zero-gradient probe", ac3(&desk)));
    results.push(("AC4 amplification identity", ac4(&desk)));
    results.push(("AC5 capacity parity", ac5(root)));
    results.push(("AC6 desk-scale trainability", ac6(&desk)));
    results.push(("AC7 fine-tune curves", ac7(&desk)));
    results.push(("AC8 mIoU machinery", ac8(&desk, root)));
    results.push(("AC9 activation-map invariances", ac9(&desk)));
    results.push(("AC10 attention contracts", ac10()));
    results.push(("AC11 I/O and reproducibility", ac11(&desk, root)));

    let mut failed = 0;
    for (name, r) in &results {
        let (pass, detail) = match r {
            Ok((p, d)) => (*p, d.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !pass as usize;
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("{}/{} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
