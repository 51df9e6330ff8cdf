use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use qavat::dataio::{load_checkpoint, save_checkpoint, Checkpoint};
use qavat::evaluation::{
    bias_demo as run_bias_demo, evaluate, run_scenario1, run_scenario2, Arm, CellStore, QUICK_CHIPS,
};
use qavat::exec::Exec;
use qavat::network::build;
use qavat::selftuning::{overhead as st_overhead, ArrayGeometry, StConfig, StType};
use qavat::training::{train as run_train, EpochRecord};
use qavat::{Error, Result};

use crate::config::RunConfig;
use crate::Common;

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    exec: Exec,
}

fn setup(common: &Common) -> Result<Run> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.model.name));
    fs::create_dir_all(&out)?;
    let exec = match common.threads {
        Some(0) => return Err(Error::Config("--threads must be >= 1".into())),
        Some(1) => Exec::Serial,
        Some(n) => {
            // Fails only if a pool already exists, in which case that one is used.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Exec::Parallel
        }
        None => Exec::default(),
    };
    Ok(Run { cfg, out, exec })
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn train(common: &Common) -> Result<()> {
    let Run { cfg, out, exec } = setup(common)?;
    let t0 = Instant::now();
    let net = cfg.network()?;
    let (train, test) = cfg.datasets()?;
    let init = cfg.model.init_checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let mut lines = String::new();
    let mut walls = Vec::new();
    let outcome = run_train(&net, &train, &test, &cfg.train, init.as_ref(), exec, &mut |r: &EpochRecord| {
        eprintln!(
            "epoch {:>3} {:?} lr {:.2e} loss {:.4} clean {:.2}%{}",
            r.epoch,
            r.phase,
            r.lr,
            r.loss,
            r.clean_acc,
            r.var_acc.map_or(String::new(), |v| format!(" var {v:.2}%"))
        );
        let mut v = serde_json::to_value(r).expect("serializable record");
        walls.push(v.as_object_mut().and_then(|o| o.remove("wall_s")));
        lines.push_str(&v.to_string());
        lines.push('\n');
    })?;
    let fp = save_checkpoint(&outcome.checkpoint, &out.join("checkpoint.qvc"))?;
    fs::write(out.join("train_log.jsonl"), lines)?;
    write_json(
        &out.join("meta.json"),
        &json!({
            "command": "train",
            "checkpoint": fp,
            "config": cfg,
            "epoch_wall_s": walls,
            "wall_s": t0.elapsed().as_secs_f64(),
        }),
    )?;
    println!("{fp}");
    Ok(())
}

pub fn eval(common: &Common, checkpoint: &Path, quick: bool) -> Result<()> {
    let Run { mut cfg, out, exec } = setup(common)?;
    if quick {
        cfg.eval.n_chips = QUICK_CHIPS;
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let (_, test) = cfg.datasets()?;
    let report = evaluate(&ckpt, &test, &cfg.eval, exec)?;
    write_json(&out.join("eval_report.json"), &report)?;
    fs::write(out.join("per_chip.csv"), report.per_chip_csv())?;
    write_json(
        &out.join("meta.json"),
        &json!({ "command": "eval", "report": report.fingerprint, "wall_s": report.wall_time_s }),
    )?;
    eprintln!(
        "{} chips: mean {:.2}% (se {:.3}, std {:.3}, min {:.2}, max {:.2}), non-recoverable {}",
        report.per_chip.len(),
        report.mean,
        report.std_err,
        report.std,
        report.min,
        report.max,
        report.non_recoverable
    );
    println!("{}", report.fingerprint);
    Ok(())
}

pub fn sweep(common: &Common, quick: bool) -> Result<()> {
    let Run { mut cfg, out, exec } = setup(common)?;
    if quick {
        cfg.eval.n_chips = QUICK_CHIPS;
    }
    let s = cfg.sweep.clone().ok_or_else(|| Error::Config("no [sweep] section".into()))?;
    let (_, test) = cfg.datasets()?;
    let store = CellStore::new(&out.join("sweep").join("cells"))?;
    let table = if s.scenario == 1 {
        let loaded: Vec<(String, Vec<Checkpoint>)> = s
            .arms
            .iter()
            .map(|a| {
                Ok((a.name.clone(), a.checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?))
            })
            .collect::<Result<_>>()?;
        let arms: Vec<Arm<'_>> =
            loaded.iter().map(|(name, c)| Arm { name: name.clone(), checkpoints: c.iter().collect() }).collect();
        run_scenario1(&arms, &test, &s.sigmas, s.variance_model, &cfg.eval, Some(&store), exec)?
    } else {
        let ckpt = load_checkpoint(s.checkpoint.as_deref().expect("validated"))?;
        run_scenario2(&ckpt, &test, &s.sigmas, s.variance_model, s.wrong_st, &cfg.eval, Some(&store), exec)?
    };
    let stem = format!("scenario{}", s.scenario);
    let csv = table.to_csv();
    fs::write(out.join("sweep").join(format!("{stem}.csv")), &csv)?;
    write_json(&out.join("sweep").join(format!("{stem}.json")), &table)?;
    print!("{csv}");
    Ok(())
}

pub fn bias_demo(w: f64, t: f64, sigma: f64, n: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let r = run_bias_demo(w, t, sigma, n, seed)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bias_demo.csv"), r.to_csv())?;
        write_json(&dir.join("bias_demo.json"), &r)?;
    }
    print!("{}", r.to_csv());
    Ok(())
}

pub fn overhead(model: &str, ltm_columns: usize, n_gtm: usize, rows: usize, cols: usize) -> Result<()> {
    let net = build(model)?;
    let st = StConfig { st_type: StType::GtmPlusLtm, ltm_columns, n_gtm, ..StConfig::default() };
    st.validate()?;
    let o = st_overhead(&st, ArrayGeometry { rows, cols }, &net)?;
    println!("{}", serde_json::to_string_pretty(&o)?);
    eprintln!("area {:.4}%  compute {:.4}%  gtm columns {}", 100.0 * o.area_ratio, 100.0 * o.flop_ratio, o.gtm_columns);
    Ok(())
}
