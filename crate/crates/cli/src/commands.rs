use std::fs;
use std::path::Path;
use std::process::ExitCode;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use stslab::budget::{budget_multiplier, total_budget, DatasetSpec, PlanMode, Planner, Rounding};
use stslab::gradcheck::gradcheck;
use stslab::harness::{
    build_tiny_net, gen_moving_shapes, pipeline_pretrain_finetune, train, EpochRecord, MovingShapesConfig,
    PipelineConfig, Samples, Stage, TrainConfig, TrainOptions, Variant,
};
use stslab::init::{load_checkpoint, save_checkpoint};
use stslab::network::transfer_2d_to_3d;
use stslab::probe::probe_network;
use stslab::rf::{comparison_table, rf_of_layer, rf_of_stack};
use stslab::{Checkpoint, Element, Error, InitStrategy, Network, NetworkSpec, Result};

use crate::{
    BudgetArgs, Cli, Command, ConvertArgs, DemoArgs, Dtype, GradcheckArgs, NetArgs, ProbeArgs, RfArgs, TrainArgs,
};

/// Largest fine-tune over scratch epoch ratio that counts as a win.
pub const DEMO_MAX_RATIO: f64 = 0.5;
/// Seeds that must win for the demo to pass.
pub const DEMO_MIN_WINS: usize = 2;

pub fn run(cli: &Cli) -> Result<ExitCode> {
    let g = &cli.global;
    match &cli.command {
        Command::Gradcheck(a) => gradcheck_cmd(a, g.seed, g.dtype.unwrap_or(Dtype::F64), g.json),
        Command::Rf(a) => rf_cmd(a, g.json),
        Command::Budget(a) => budget_cmd(a, g.json),
        Command::Probe(a) => probe_cmd(a, g.json),
        Command::Convert(a) => match g.dtype.unwrap_or(Dtype::F32) {
            Dtype::F32 => convert_cmd::<f32>(a, g.seed),
            Dtype::F64 => convert_cmd::<f64>(a, g.seed),
        },
        Command::Train(a) => match g.dtype.unwrap_or(Dtype::F32) {
            Dtype::F32 => train_cmd::<f32>(a, g.seed),
            Dtype::F64 => train_cmd::<f64>(a, g.seed),
        },
        Command::Demo(a) => match g.dtype.unwrap_or(Dtype::F32) {
            Dtype::F32 => demo_cmd::<f32>(a, g.json),
            Dtype::F64 => demo_cmd::<f64>(a, g.json),
        },
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn gradcheck_cmd(a: &GradcheckArgs, seed: u64, dtype: Dtype, as_json: bool) -> Result<ExitCode> {
    let (h, tol) = match dtype {
        Dtype::F64 => (a.step.unwrap_or(1e-5), a.tol.unwrap_or(1e-6)),
        Dtype::F32 => (a.step.unwrap_or(1e-2), a.tol.unwrap_or(1e-2)),
    };
    let mut ok = true;
    for &op in &a.op.0 {
        let r = match dtype {
            Dtype::F64 => gradcheck::<f64>(op, a.instances, seed, h)?,
            Dtype::F32 => gradcheck::<f32>(op, a.instances, seed, h)?,
        };
        let pass = r.max_rel_err < tol;
        ok &= pass;
        if as_json {
            println!("{}", json!({"op": r.op, "instances": r.instances, "max_rel_err": r.max_rel_err, "tol": tol, "pass": pass}));
        } else {
            let verdict = if pass { "<" } else { ">=" };
            println!("{op}: max_rel_err {verdict} {tol:e} ({:.3e} over {} instances)", r.max_rel_err, r.instances);
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn rf_cmd(a: &RfArgs, as_json: bool) -> Result<ExitCode> {
    if a.layers.is_empty() {
        for row in comparison_table() {
            let rate = row.rate.map(|r| r.to_string());
            if as_json {
                println!("{}", json!({"label": row.label, "rate": row.rate, "rf": row.rf}));
            } else {
                println!("{:<28} {:<5} {}", row.label, rate.as_deref().unwrap_or("-"), row.rf);
            }
        }
        return Ok(ExitCode::SUCCESS);
    }
    let rfs = a.layers.iter().map(rf_of_layer).collect::<Result<Vec<_>>>()?;
    let stack = rf_of_stack(&rfs);
    if as_json {
        let layers: Vec<String> = rfs.iter().map(|l| l.render()).collect();
        println!("{}", json!({"layers": layers, "stack": stack.to_string()}));
        return Ok(ExitCode::SUCCESS);
    }
    for l in &rfs {
        println!("{}", l.render());
    }
    if rfs.len() > 1 {
        println!("stack {stack}");
    }
    Ok(ExitCode::SUCCESS)
}

fn dataset(name: &str, file: Option<&Path>) -> Result<DatasetSpec> {
    match (name, file) {
        (_, Some(path)) => DatasetSpec::from_json(&read(path)?),
        ("custom", None) => Err(Error::Config("--dataset custom needs --dataset-file".into())),
        _ => DatasetSpec::builtin(name)
            .ok_or_else(|| Error::Config(format!("unknown dataset {name:?}; expected imagenet, k400, ssv2 or custom"))),
    }
}

fn budget_cmd(a: &BudgetArgs, as_json: bool) -> Result<ExitCode> {
    let finetune = dataset(&a.dataset, a.dataset_file.as_deref())?;
    let pretrain = DatasetSpec::builtin(&a.pretrain_dataset)
        .ok_or_else(|| Error::Config(format!("unknown pre-train dataset {:?}", a.pretrain_dataset)))?;
    let planner = Planner::new(pretrain, finetune);
    let baseline_epochs = a.baseline_epochs.unwrap_or(match a.mode {
        PlanMode::Fixed => 100,
        PlanMode::Sota => 256,
    });
    let baseline = planner.baseline(a.frames, baseline_epochs);
    baseline.validate()?;
    let plan = match (a.pretrain_epochs, a.mode) {
        (Some(p), _) => planner.plan(a.frames, p, a.finetune_epochs),
        (None, PlanMode::Fixed) => planner.plan_fixed_budget(a.frames, baseline_epochs, a.finetune_epochs, &a.candidates)?,
        (None, PlanMode::Sota) => planner.plan_sota(a.frames),
    };
    plan.validate()?;
    let m = budget_multiplier(&plan, &baseline)?;
    let rounding = if a.half_up { Rounding::HalfUp } else { Rounding::Truncate };
    let shown = format!("x{}", m.display(a.decimals, rounding));
    if as_json {
        println!(
            "{}",
            json!({
                "plan": plan,
                "baseline": baseline,
                "plan_budget": total_budget(&plan),
                "baseline_budget": total_budget(&baseline),
                "multiplier": shown,
                "exact": format!("{}/{}", m.ratio().numer(), m.ratio().denom()),
            })
        );
    } else {
        println!(
            "pre-train {} epochs on {} + fine-tune {} epochs on {} at {} frames: {} images",
            plan.pretrain_epochs,
            plan.pretrain.name,
            plan.finetune_epochs,
            plan.finetune.name,
            plan.frames,
            total_budget(&plan)
        );
        println!("baseline {} epochs from scratch: {} images", baseline_epochs, total_budget(&baseline));
        println!("multiplier {shown}");
    }
    Ok(ExitCode::SUCCESS)
}

fn probe_cmd(a: &ProbeArgs, as_json: bool) -> Result<ExitCode> {
    let spec = NetworkSpec::from_json(&read(&a.spec)?)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (spec2d, ckpt2d) = probe_network(&spec, &ckpt, a.t as usize)?;
    save_checkpoint(&ckpt2d, &a.out)?;
    if let Some(p) = &a.out_spec {
        write(p, &spec2d.to_json())?;
    }
    if as_json {
        println!("{}", json!({"t": a.t, "params": ckpt2d.len(), "out": a.out}));
    } else {
        println!("probed t={} into {} tensors at {}", a.t, ckpt2d.len(), a.out.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// Class count of the `head` layer stored in a checkpoint.
fn head_classes(ckpt: &Checkpoint) -> Option<usize> {
    ckpt.get("head.weight").map(|t| t.dims()[0])
}

fn net_spec(a: &NetArgs, fallback_classes: Option<usize>) -> Result<NetworkSpec> {
    match &a.spec {
        Some(p) => NetworkSpec::from_json(&read(p)?),
        None => {
            let classes = a
                .classes
                .or(fallback_classes)
                .ok_or_else(|| Error::Config("give --classes or a checkpoint with a head".into()))?;
            build_tiny_net(a.variant, a.width, classes)
        }
    }
}

fn convert_cmd<T: Element>(a: &ConvertArgs, seed: u64) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let spec = net_spec(&a.net, head_classes(&ckpt))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = transfer_2d_to_3d::<T>(&ckpt, &spec, &a.init, &mut rng)?;
    save_checkpoint(&net.to_checkpoint(), &a.out)?;
    if let Some(p) = &a.out_spec {
        write(p, &spec.to_json())?;
    }
    eprintln!("{} parameters initialized with {}", net.param_count(), a.init);
    Ok(ExitCode::SUCCESS)
}

fn train_cmd<T: Element>(a: &TrainArgs, seed: u64) -> Result<ExitCode> {
    let data_cfg = MovingShapesConfig {
        n: a.n,
        frames: a.frames,
        height: a.size,
        width: a.size,
        num_shapes: a.shapes,
        num_motions: a.motions,
        noise: a.noise,
    };
    let train_data = gen_moving_shapes(seed.wrapping_mul(2), &data_cfg)?;
    let val_data = gen_moving_shapes(seed.wrapping_mul(2).wrapping_add(1), &MovingShapesConfig { n: a.val, ..data_cfg })?;
    let spec = build_tiny_net(a.variant, a.width, train_data.num_classes(a.task))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = match (&a.load, a.init) {
        (None, _) => Network::<T>::init(spec, &mut rng)?,
        (Some(p), InitStrategy::Scratch) => Network::from_checkpoint(spec, &load_checkpoint(p)?)?,
        (Some(p), init) => transfer_2d_to_3d::<T>(&load_checkpoint(p)?, &spec, &init, &mut rng)?,
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        seed,
        lr_schedule: a.schedule,
    };
    let log = |r: &EpochRecord| println!("{}", serde_json::to_string(r).expect("plain record"));
    let (train_x, val_x);
    let (train_in, val_in) = if a.variant == Variant::TwoD {
        train_x = train_data.images();
        val_x = val_data.images();
        (&train_x, &val_x)
    } else {
        (train_data.clips.tensor(), val_data.clips.tensor())
    };
    let train_set = Samples::new(train_in, train_data.labels(a.task))?;
    let val_set = Samples::new(val_in, val_data.labels(a.task))?;
    train(&mut net, train_set, Some(val_set), &cfg, TrainOptions::default(), log)?;
    if let Some(p) = &a.save {
        save_checkpoint(&net.to_checkpoint(), p)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn demo_cmd<T: Element>(a: &DemoArgs, as_json: bool) -> Result<ExitCode> {
    let cfg: PipelineConfig = match &a.config {
        Some(p) => serde_json::from_str(&read(p)?)?,
        None => PipelineConfig::demo(),
    };
    let mut wins = 0;
    for &seed in &a.seeds {
        let verbose = a.verbose;
        let r = pipeline_pretrain_finetune::<T>(&cfg, seed, |stage: Stage, rec: &EpochRecord| {
            if verbose {
                eprintln!("seed {seed} {stage:?} {}", serde_json::to_string(rec).expect("plain record"));
            }
        })?;
        let ratio = r.epoch_ratio();
        let win = ratio.is_some_and(|x| x <= DEMO_MAX_RATIO);
        wins += usize::from(win);
        if as_json {
            println!("{}", json!({"report": r, "ratio": ratio, "win": win}));
        } else {
            let show = |e: Option<usize>| e.map_or("-".to_string(), |e| e.to_string());
            println!(
                "seed {seed}: pre-train acc {:.3}, fine-tune {} epochs, scratch {} epochs (cap {}), ratio {}",
                r.pretrain_accuracy,
                show(r.finetune_epochs),
                show(r.scratch_epochs),
                r.scratch_cap,
                ratio.map_or("-".to_string(), |x| format!("{x:.2}"))
            );
        }
    }
    let pass = wins >= DEMO_MIN_WINS.min(a.seeds.len());
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("{verdict}: {wins}/{} seeds at ratio <= {DEMO_MAX_RATIO}", a.seeds.len());
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
