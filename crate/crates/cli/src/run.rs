//! Mode implementations: each writes its artifacts under one run directory
//! and never touches paths outside it.

use std::fs;
use std::io::Write;
use std::path::Path;

use awlab_core::data::{gen_dataset, load_pair_dir, split_dataset, ManifestEntry, SamplePair};
use awlab_core::law::{lesion_region_mse, train_law, LawRunResult, NoiseSchedule};
use awlab_core::order::{eval_seg, predict, train_seg, OrderConfig, OrderNetwork};
use awlab_core::pnm::{self, PnmImage};
use awlab_core::profiler;
use awlab_core::{checkpoint, ParamStore, Tensor};
use serde_json::{json, Value};

use crate::config::{set_path, ExperimentConfig};

pub type RunResult = Result<(), String>;

fn write_json(path: &Path, value: &Value) -> Result<(), String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn config_echo(cfg: &ExperimentConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn report_skeleton(mode: &str, cfg: &ExperimentConfig) -> Value {
    json!({
        "mode": mode,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config_echo(cfg),
    })
}

/// Wall-clock stamp lives in its own file so report.json stays byte-stable
/// across identical runs.
fn write_stamp(dir: &Path) -> Result<(), String> {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    fs::write(dir.join("timestamp.txt"), format!("{now}\n")).map_err(|e| e.to_string())
}

fn prepare_dir(dir: &Path) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<SamplePair>, String> {
    match (&cfg.data.images_dir, &cfg.data.masks_dir) {
        (Some(images), Some(masks)) => {
            let outcome =
                load_pair_dir(images, masks, cfg.data.center_crop).map_err(|e| e.to_string())?;
            for err in &outcome.errors {
                eprintln!("warning: {err}");
            }
            if outcome.pairs.is_empty() {
                return Err("no usable image/mask pairs found".into());
            }
            Ok(outcome.pairs)
        }
        _ => gen_dataset(&cfg.data.synth, cfg.data.count).map_err(|e| e.to_string()),
    }
}

fn split(cfg: &ExperimentConfig, pairs: Vec<SamplePair>) -> (Vec<SamplePair>, Vec<SamplePair>) {
    split_dataset(cfg.data.split_seed, pairs)
}

fn tensor_to_pgm(path: &Path, t: &Tensor) -> Result<(), String> {
    let img = PnmImage::from_tensor(t).map_err(|e| e.to_string())?;
    pnm::write(path, &img).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> RunResult {
    prepare_dir(&out.join("images"))?;
    prepare_dir(&out.join("masks"))?;
    let pairs = gen_dataset(&cfg.data.synth, cfg.data.count).map_err(|e| e.to_string())?;
    let mut manifest = Vec::with_capacity(pairs.len());
    let mut ratio_sum = 0.0;
    for p in &pairs {
        let image_path = out.join("images").join(format!("{}.pgm", p.id));
        let mask_path = out.join("masks").join(format!("{}.pgm", p.id));
        tensor_to_pgm(&image_path, &p.image)?;
        tensor_to_pgm(&mask_path, &p.mask)?;
        ratio_sum += p.lesion_ratio();
        manifest.push(ManifestEntry {
            id: p.id.clone(),
            image_path,
            mask_path,
            ratio: p.lesion_ratio(),
        });
    }
    write_json(&out.join("manifest.json"), &serde_json::to_value(&manifest).unwrap())?;
    let mut report = report_skeleton("gen-data", cfg);
    report["metrics"] = json!({
        "count": pairs.len(),
        "mean_ratio": ratio_sum / pairs.len() as f64,
    });
    write_json(&out.join("report.json"), &report)?;
    write_stamp(out)
}

pub fn profile(cfg: &ExperimentConfig, out: &Path) -> RunResult {
    prepare_dir(out)?;
    let prof = profiler::profile_config(cfg.order.clone(), cfg.profile_input)
        .map_err(|e| e.to_string())?;
    let mut report = report_skeleton("profile", cfg);
    report["profile"] = serde_json::to_value(&prof).unwrap();
    report["params"] = json!(prof.total_params);
    report["flops"] = json!(prof.total_flops);
    write_json(&out.join("report.json"), &report)?;
    write_stamp(out)
}

/// Final metrics of a seg run plus the smoothed tail mean used for ranking.
fn seg_metrics(log: &[awlab_core::order::SegEpochRecord]) -> Value {
    let last = log.last().expect("non-empty log");
    let k = log.len().saturating_sub(3);
    let tail = &log[k..];
    let mean3 = tail.iter().map(|r| r.val_dice).sum::<f64>() / tail.len() as f64;
    json!({
        "epochs": log.len(),
        "train_loss": last.train_loss,
        "val_dice": last.val_dice,
        "val_iou": last.val_iou,
        "val_dice_tail_mean": mean3,
    })
}

pub fn train_seg_mode(cfg: &ExperimentConfig, out: &Path) -> RunResult {
    prepare_dir(out)?;
    let (train, val) = split(cfg, load_dataset(cfg)?);
    if train.is_empty() || val.is_empty() {
        return Err("dataset too small to split".into());
    }
    let run = train_seg(&train, &val, cfg.order.clone(), &cfg.seg_train, cfg.seed)
        .map_err(|e| e.to_string())?;

    let mut log = fs::File::create(out.join("log.jsonl")).map_err(|e| e.to_string())?;
    for rec in &run.log {
        writeln!(log, "{}", serde_json::to_string(rec).unwrap()).map_err(|e| e.to_string())?;
    }
    checkpoint::save(&out.join("checkpoint"), &run.store, config_echo(cfg))
        .map_err(|e| e.to_string())?;

    let prof = profiler::profile(&run.store, &run.network, cfg.profile_input)
        .map_err(|e| e.to_string())?;
    let mut report = report_skeleton("train-seg", cfg);
    report["metrics"] = seg_metrics(&run.log);
    report["profile"] = serde_json::to_value(&prof).unwrap();
    write_json(&out.join("report.json"), &report)?;
    write_stamp(out)
}

fn law_stability(run: &LawRunResult) -> (bool, String) {
    if let Some(d) = &run.diverged {
        return (false, format!("diverged: {d}"));
    }
    let first = run.log.first().map(|r| r.total).unwrap_or(f64::NAN);
    let last = run.log.last().map(|r| r.total).unwrap_or(f64::NAN);
    let max = run.log.iter().map(|r| r.total).fold(f64::NEG_INFINITY, f64::max);
    if !(first.is_finite() && last.is_finite()) {
        return (false, "non-finite loss trace".into());
    }
    if last > first {
        return (false, format!("non-monotone: total {first:.4} -> {last:.4}"));
    }
    if max > 3.0 * first.abs().max(1e-12) {
        return (false, format!("unbounded spike: max {max:.4} vs first {first:.4}"));
    }
    (true, "ok".into())
}

pub fn train_law_mode(cfg: &ExperimentConfig, out: &Path) -> RunResult {
    prepare_dir(&out.join("maps"))?;
    let (train, eval) = split(cfg, load_dataset(cfg)?);
    if train.is_empty() || eval.is_empty() {
        return Err("dataset too small to split".into());
    }
    let sched = NoiseSchedule::default_desk();
    let run = train_law(&train, &cfg.law, &cfg.law_train, &sched, cfg.seed)
        .map_err(|e| e.to_string())?;

    let mut log = fs::File::create(out.join("log.jsonl")).map_err(|e| e.to_string())?;
    for rec in &run.log {
        writeln!(log, "{}", serde_json::to_string(rec).unwrap()).map_err(|e| e.to_string())?;
    }
    for snap in &run.snapshots {
        let (n, _, h, w) = snap.delta.dims4().map_err(|e| e.to_string())?;
        for i in 0..n {
            let plane = Tensor::new(
                vec![1, h, w],
                snap.delta.data()[i * h * w..(i + 1) * h * w].to_vec(),
            )
            .map_err(|e| e.to_string())?;
            tensor_to_pgm(&out.join("maps").join(format!("delta_s{}_i{i}.pgm", snap.step)), &plane)?;
        }
    }
    checkpoint::save(&out.join("checkpoint"), &run.store, config_echo(cfg))
        .map_err(|e| e.to_string())?;

    let (stable, stability) = law_stability(&run);
    let alignment: Vec<Value> = run
        .snapshots
        .iter()
        .map(|s| json!({"step": s.step, "alignment_dice": s.alignment_dice}))
        .collect();
    let mut report = report_skeleton("train-law", cfg);
    let lesion_mse = if run.diverged.is_none() {
        Some(
            lesion_region_mse(&run.store, &run.models, &eval, &sched, cfg.seed)
                .map_err(|e| e.to_string())?,
        )
    } else {
        None
    };
    report["metrics"] = json!({
        "steps": run.log.len(),
        "final_total": run.log.last().map(|r| r.total),
        "lesion_mse": lesion_mse,
        "stable": stable,
        "stability": stability,
        "diverged": run.diverged,
        "alignment": alignment,
    });
    write_json(&out.join("report.json"), &report)?;
    write_stamp(out)?;
    match run.diverged {
        Some(d) => Err(format!("training diverged ({d}); diagnostics written to {}", out.display())),
        None => Ok(()),
    }
}

fn restore_network(cfg_dir: &Path) -> Result<(ParamStore, OrderNetwork), String> {
    let (loaded, manifest) = checkpoint::load(cfg_dir).map_err(|e| e.to_string())?;
    let order: OrderConfig = serde_json::from_value(
        manifest.config.get("order").cloned().unwrap_or(Value::Null),
    )
    .map_err(|e| format!("checkpoint config: {e}"))?;
    let seed = manifest.config.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
    let mut store = ParamStore::new();
    let network = OrderNetwork::new(&mut store, order, seed).map_err(|e| e.to_string())?;
    checkpoint::restore_into(&mut store, &loaded).map_err(|e| e.to_string())?;
    Ok((store, network))
}

pub fn eval_mode(cfg: &ExperimentConfig, out: &Path) -> RunResult {
    prepare_dir(out)?;
    let ckpt = cfg.checkpoint.as_ref().ok_or("eval requires a checkpoint path")?;
    let (store, network) = restore_network(ckpt)?;
    let pairs = load_dataset(cfg)?;
    let (dice, iou) = eval_seg(&store, &network, &pairs, cfg.threshold).map_err(|e| e.to_string())?;
    let mut report = report_skeleton("eval", cfg);
    report["metrics"] = json!({"samples": pairs.len(), "mdice": dice, "miou": iou});
    write_json(&out.join("report.json"), &report)?;
    write_stamp(out)
}

pub fn export_maps(cfg: &ExperimentConfig, out: &Path) -> RunResult {
    prepare_dir(&out.join("maps"))?;
    let ckpt = cfg.checkpoint.as_ref().ok_or("export-maps requires a checkpoint path")?;
    let (store, network) = restore_network(ckpt)?;
    let pairs = load_dataset(cfg)?;
    for p in &pairs {
        let prob = predict(&store, &network, &p.image).map_err(|e| e.to_string())?;
        tensor_to_pgm(&out.join("maps").join(format!("{}_pred.pgm", p.id)), &prob)?;
        tensor_to_pgm(&out.join("maps").join(format!("{}_mask.pgm", p.id)), &p.mask)?;
    }
    let mut report = report_skeleton("export-maps", cfg);
    report["metrics"] = json!({"exported": pairs.len()});
    write_json(&out.join("report.json"), &report)?;
    write_stamp(out)
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> RunResult {
    let section = &cfg.sweep;
    if section.variants.is_empty() {
        return Err("sweep needs at least one variant".into());
    }
    if section.axis.is_empty() || section.axis == "mode" {
        return Err("sweep axis must name a config field other than mode".into());
    }
    let mode = cfg.mode.clone().ok_or("sweep config must set a base mode")?;
    if mode != "train-seg" && mode != "train-law" {
        return Err(format!("sweep supports train-seg and train-law, not {mode}"));
    }
    if !section.labels.is_empty() && section.labels.len() != section.variants.len() {
        return Err("sweep labels must match variants".into());
    }
    prepare_dir(out)?;

    let mut rows = Vec::new();
    for (vi, variant) in section.variants.iter().enumerate() {
        let label = section
            .labels
            .get(vi)
            .cloned()
            .unwrap_or_else(|| serde_json::to_string(variant).unwrap());
        let mut per_seed = Vec::new();
        for &seed in &section.seeds {
            let mut value = serde_json::to_value(cfg).unwrap();
            set_path(&mut value, &section.axis, variant.clone()).map_err(|e| e.to_string())?;
            set_path(&mut value, "seed", json!(seed)).map_err(|e| e.to_string())?;
            set_path(&mut value, "sweep.variants", json!([])).map_err(|e| e.to_string())?;
            let mut run_cfg: ExperimentConfig =
                serde_json::from_value(value).map_err(|e| e.to_string())?;
            run_cfg.out_dir = None;
            let run_dir = out.join(format!("run-{vi}-s{seed}"));
            let res = match mode.as_str() {
                "train-seg" => train_seg_mode(&run_cfg, &run_dir),
                _ => train_law_mode(&run_cfg, &run_dir),
            };
            // a flagged (diverged) law run still contributes its row
            if let Err(e) = &res {
                if mode == "train-seg" {
                    return Err(e.clone());
                }
                eprintln!("warning: {e}");
            }
            let report: Value = serde_json::from_str(
                &fs::read_to_string(run_dir.join("report.json")).map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            per_seed.push(report["metrics"].clone());
        }
        rows.push(json!({"label": label, "variant": variant, "seeds": section.seeds, "metrics": per_seed}));
    }

    let summary_rows: Vec<Value> = rows
        .iter()
        .map(|row| {
            let metrics = row["metrics"].as_array().unwrap();
            let mut out_row = row.clone();
            if mode == "train-seg" {
                let vals: Vec<f64> = metrics
                    .iter()
                    .filter_map(|m| m["val_dice_tail_mean"].as_f64())
                    .collect();
                out_row["mean_mdice"] = json!(mean(&vals));
            } else {
                let vals: Vec<f64> =
                    metrics.iter().filter_map(|m| m["lesion_mse"].as_f64()).collect();
                out_row["mean_lesion_mse"] = if vals.is_empty() { Value::Null } else { json!(mean(&vals)) };
                let flagged = metrics.iter().any(|m| m["stable"] != json!(true));
                out_row["flagged"] = json!(flagged);
            }
            out_row
        })
        .collect();

    let mut sorted = summary_rows.clone();
    if mode == "train-seg" {
        sorted.sort_by(|a, b| {
            b["mean_mdice"]
                .as_f64()
                .unwrap_or(0.0)
                .partial_cmp(&a["mean_mdice"].as_f64().unwrap_or(0.0))
                .unwrap()
        });
    }

    let summary = json!({
        "mode": mode,
        "axis": section.axis,
        "seeds": section.seeds,
        "rows": sorted,
    });
    write_json(&out.join("sweep_summary.json"), &summary)?;
    fs::write(out.join("sweep_summary.txt"), summary_text(&mode, &sorted))
        .map_err(|e| e.to_string())?;
    write_stamp(out)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn summary_text(mode: &str, rows: &[Value]) -> String {
    let mut out = String::new();
    if mode == "train-seg" {
        out.push_str(&format!("{:<28} {:>12}\n", "variant", "mean mDice"));
        for r in rows {
            out.push_str(&format!(
                "{:<28} {:>12.4}\n",
                r["label"].as_str().unwrap_or("?"),
                r["mean_mdice"].as_f64().unwrap_or(f64::NAN)
            ));
        }
    } else {
        out.push_str(&format!("{:<28} {:>14} {:>9}\n", "variant", "lesion MSE", "flagged"));
        for r in rows {
            let mse = r["mean_lesion_mse"].as_f64();
            out.push_str(&format!(
                "{:<28} {:>14} {:>9}\n",
                r["label"].as_str().unwrap_or("?"),
                mse.map(|m| format!("{m:.5}")).unwrap_or_else(|| "-".into()),
                if r["flagged"] == json!(true) { "yes" } else { "no" }
            ));
        }
    }
    out
}
