use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cdfnet::gradcheck::{gradcheck, CheckUnit};
use cdfnet::metrics::{comparison_table, MetricsReport};
use cdfnet::network::{Model, Variant, VariantSpec};
use cdfnet::optim::TrainConfig;
use cdfnet::synth::{self, SceneSpec, Split};
use cdfnet::train::{self, FINAL_CHECKPOINT};
use cdfnet::{Error, Result, Rng};

use crate::config::{Settings, CONFIG_NAME};
use crate::{EvalArgs, GenDataArgs, GradcheckArgs, ParamsArgs, TrainArgs};

pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_KV: &str = "report.kv";

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Usage(format!("cannot write {}: {e}", path.display())))
}

const GEN_KEYS: [(&str, &str); 6] = [
    ("preset", "easy"),
    ("n", ""),
    ("seed", "0"),
    ("out", ""),
    ("test-fraction", "0.2"),
    ("val-fraction", "0"),
];

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = Settings::resolve(
        &GEN_KEYS,
        a.config.as_deref(),
        &[
            ("preset", s(&a.preset)),
            ("n", s(&a.n)),
            ("seed", s(&a.seed)),
            ("out", s(&a.out.as_ref().map(|p| p.display()))),
            ("test-fraction", s(&a.test_fraction)),
            ("val-fraction", s(&a.val_fraction)),
        ],
    )?;
    let out = PathBuf::from(cfg.require("out")?);
    let n: usize = cfg.get("n")?;
    let mut spec =
        SceneSpec::preset(cfg.require("preset")?).map_err(|e| Error::Usage(e.to_string()))?;
    spec.test_fraction = cfg.get("test-fraction")?;
    spec.val_fraction = cfg.get("val-fraction")?;
    let ds = synth::generate(&spec, n, cfg.get("seed")?)?;
    synth::export(&ds, &out)?;
    cfg.echo(&out)?;
    println!(
        "wrote {} samples ({} train, {} val, {} test) to {}",
        ds.len(),
        ds.indices(Split::Train).len(),
        ds.indices(Split::Val).len(),
        ds.indices(Split::Test).len(),
        out.display()
    );
    Ok(())
}

const TRAIN_KEYS: [(&str, &str); 16] = [
    ("variant", "cdfnet"),
    ("data", ""),
    ("out", ""),
    ("seed", "0"),
    ("epochs", "40"),
    ("base-width", "8"),
    ("kernel-size", "3"),
    ("batch-size", "4"),
    ("lr", "0.01"),
    ("lr-decay", "0.1"),
    ("lr-step", "20"),
    ("momentum", "0.9"),
    ("weight-decay", "1e-6"),
    ("augment", "on"),
    ("patience", "none"),
    ("checkpoint-every", "0"),
];

fn variant_spec(cfg: &Settings, num_classes: usize) -> Result<VariantSpec> {
    let variant: Variant = cfg
        .require("variant")?
        .parse()
        .map_err(|e: Error| Error::Usage(e.to_string()))?;
    let spec = VariantSpec {
        base_width: cfg.get("base-width")?,
        kernel_size: cfg.get("kernel-size")?,
        num_classes,
        ..VariantSpec::new(variant)
    };
    spec.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(spec)
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = Settings::resolve(
        &TRAIN_KEYS,
        a.config.as_deref(),
        &[
            ("variant", s(&a.variant)),
            ("data", s(&a.data.as_ref().map(|p| p.display()))),
            ("out", s(&a.out.as_ref().map(|p| p.display()))),
            ("seed", s(&a.seed)),
            ("epochs", s(&a.epochs)),
            ("base-width", s(&a.base_width)),
            ("kernel-size", s(&a.kernel_size)),
            ("batch-size", s(&a.batch_size)),
            ("lr", s(&a.lr)),
            ("lr-decay", s(&a.lr_decay)),
            ("lr-step", s(&a.lr_step)),
            ("momentum", s(&a.momentum)),
            ("weight-decay", s(&a.weight_decay)),
            ("augment", s(&a.augment)),
            ("patience", s(&a.patience)),
            ("checkpoint-every", s(&a.checkpoint_every)),
        ],
    )?;
    let out = PathBuf::from(cfg.require("out")?);
    let ds = synth::import(cfg.require("data")?)?;
    let spec = variant_spec(&cfg, ds.spec.num_classes())?;
    let seed: u64 = cfg.get("seed")?;
    let tc = TrainConfig {
        batch_size: cfg.get("batch-size")?,
        momentum: cfg.get("momentum")?,
        weight_decay: cfg.get("weight-decay")?,
        lr0: cfg.get("lr")?,
        lr_decay: cfg.get("lr-decay")?,
        lr_step_epochs: cfg.get("lr-step")?,
        epochs: cfg.get("epochs")?,
        seed,
        augment: cfg.flag("augment")?,
        patience: cfg.get_opt("patience")?,
        checkpoint_every: cfg.get("checkpoint-every")?,
    };
    tc.validate().map_err(|e| Error::Usage(e.to_string()))?;
    cfg.echo(&out)?;

    let mut model = Model::<f32>::build(spec, &mut Rng::new(seed))?;
    let outcome = train::train(&mut model, &ds, &tc, Some(&out))?;
    write(&out.join(REPORT_TEXT), &outcome.report.to_text())?;
    write(&out.join(REPORT_KV), &outcome.report.to_kv())?;
    if a.dump_csv {
        let mut csv = String::from("epoch,loss,val_loss\n");
        for (i, (e, l)) in outcome.loss_curve.iter().enumerate() {
            let v = outcome
                .val_curve
                .get(i)
                .map_or(String::new(), |(_, v)| v.to_string());
            let _ = writeln!(csv, "{e},{l},{v}");
        }
        write(&out.join("loss.csv"), &csv)?;
    }
    if outcome.stopped_early {
        println!("stopped early after {} epochs", outcome.loss_curve.len());
    }
    print!("{}", outcome.report.to_text());
    Ok(())
}

const EVAL_KEYS: [(&str, &str); 6] = [
    ("checkpoint", ""),
    ("variant", "cdfnet"),
    ("base-width", "8"),
    ("kernel-size", "3"),
    ("data", ""),
    ("split", "test"),
];

fn eval_one(cfg: &Settings, label: Option<&str>) -> Result<MetricsReport> {
    let ds = synth::import(cfg.require("data")?)?;
    let spec = variant_spec(cfg, ds.spec.num_classes())?;
    let split = Split::parse(cfg.require("split")?).map_err(|e| Error::Usage(e.to_string()))?;
    if ds.indices(split).is_empty() {
        return Err(Error::Usage(format!(
            "split {} of the dataset is empty",
            split.name()
        )));
    }
    let mut model = Model::<f32>::load_checkpoint(spec, cfg.require("checkpoint")?)?;
    let mut report = train::evaluate(&mut model, &ds, split, 4)?;
    if let Some(l) = label {
        report.variant = l.to_owned();
    }
    Ok(report)
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let flags = [
        ("checkpoint", s(&a.checkpoint.as_ref().map(|p| p.display()))),
        ("variant", s(&a.variant)),
        ("base-width", s(&a.base_width)),
        ("kernel-size", s(&a.kernel_size)),
        ("data", s(&a.data.as_ref().map(|p| p.display()))),
        ("split", s(&a.split)),
    ];
    let mut reports = Vec::new();
    if a.run.is_empty() {
        let cfg = Settings::resolve(&EVAL_KEYS, a.config.as_deref(), &flags)?;
        reports.push(eval_one(&cfg, None)?);
    }
    for run in &a.run {
        let run_cfg = run.join(CONFIG_NAME);
        let saved = Settings::load(&run_cfg)?;
        let checkpoint = run.join(FINAL_CHECKPOINT).display().to_string();
        let mut merged: Vec<(&str, Option<String>)> = EVAL_KEYS
            .iter()
            .map(|(k, _)| (*k, saved.raw(k).map(str::to_owned)))
            .collect();
        merged[0].1 = Some(checkpoint);
        for (k, v) in &flags {
            if v.is_some() && *k != "checkpoint" {
                merged.iter_mut().find(|(m, _)| m == k).unwrap().1 = v.clone();
            }
        }
        let cfg = Settings::resolve(&EVAL_KEYS, None, &merged)?;
        let name = run.file_name().map_or_else(
            || run.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        let label = format!("{}:{name}", cfg.require("variant")?);
        reports.push(eval_one(&cfg, Some(&label))?);
    }
    for r in &reports {
        print!("{}", r.to_text());
        println!();
    }
    let table = comparison_table(&reports);
    if reports.len() > 1 {
        print!("{table}");
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out)
            .map_err(|e| Error::Usage(format!("cannot create {}: {e}", out.display())))?;
        for (i, r) in reports.iter().enumerate() {
            write(&out.join(format!("eval_{i}.kv")), &r.to_kv())?;
        }
        write(&out.join("compare.txt"), &table)?;
        if a.dump_csv {
            let mut csv = String::from("run,class,dice\n");
            for r in &reports {
                for (c, d) in r.per_class_dice.iter().enumerate() {
                    let _ = writeln!(
                        csv,
                        "{},{c},{}",
                        r.variant,
                        d.map_or(String::new(), |x| x.to_string())
                    );
                }
            }
            write(&out.join("dice.csv"), &csv)?;
        }
    }
    Ok(())
}

pub fn gradcheck_cmd(a: &GradcheckArgs) -> Result<()> {
    let units = if a.unit == "all" {
        CheckUnit::all()
    } else {
        vec![a.unit.parse()?]
    };
    let mut failing = Vec::new();
    for unit in units {
        let tol = a.tolerance.unwrap_or(unit.default_tolerance());
        let report = gradcheck(unit, tol, a.seed)?;
        print!("{}", report.to_text());
        failing.extend(report.failing().into_iter().map(|f| format!("{unit} {f}")));
    }
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(failing))
    }
}

/// Parameter totals for every variant, rendered as a table.
pub fn params_table(
    spec_of: impl Fn(Variant) -> VariantSpec,
) -> Result<(String, Vec<(Variant, usize)>)> {
    let mut counts = Vec::new();
    for v in Variant::ALL {
        let model = Model::<f32>::build(spec_of(v), &mut Rng::new(0))?;
        counts.push((v, model.param_counts()));
    }
    // CDFNet has every module kind, so its order comes first.
    let mut modules: Vec<String> = Vec::new();
    for (_, c) in counts.iter().rev() {
        for (m, _) in &c.modules {
            if !modules.contains(m) {
                modules.push(m.clone());
            }
        }
    }
    let mut s = format!("{:<12}", "module");
    for (v, _) in &counts {
        let _ = write!(s, "{:>10}", v.name());
    }
    s.push('\n');
    for m in &modules {
        let _ = write!(s, "{m:<12}");
        for (_, c) in &counts {
            let n = c
                .modules
                .iter()
                .find(|(k, _)| k == m)
                .map_or(0, |(_, n)| *n);
            let _ = write!(s, "{n:>10}");
        }
        s.push('\n');
    }
    let _ = write!(s, "{:<12}", "total");
    for (_, c) in &counts {
        let _ = write!(s, "{:>10}", c.total);
    }
    s.push('\n');
    Ok((s, counts.into_iter().map(|(v, c)| (v, c.total)).collect()))
}

pub fn params_cmd(a: &ParamsArgs) -> Result<()> {
    let (table, totals) = params_table(|v| VariantSpec {
        base_width: a.base_width,
        num_classes: a.num_classes,
        kernel_size: a.kernel_size,
        input_channels: a.input_channels,
        ..VariantSpec::new(v)
    })
    .map_err(|e| Error::Usage(e.to_string()))?;
    print!("{table}");
    let total = |v| totals.iter().find(|(x, _)| *x == v).map_or(0, |(_, n)| *n);
    println!(
        "cdfnet <= bl0: {}",
        if total(Variant::CdfNet) <= total(Variant::Bl0) {
            "yes"
        } else {
            "no"
        }
    );
    Ok(())
}
