use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dimlight::ablation::run_ablation;
use dimlight::checkpoint::Checkpoint;
use dimlight::config::RunConfig;
use dimlight::dataset::{load_dataset, DatasetSplit};
use dimlight::image_io::{self, pad_reflect};
use dimlight::metrics::MetricReport;
use dimlight::profile::count_flops;
use dimlight::train::{evaluate_with, train, Session};
use dimlight::{Error, Network, Result, Variant};

use crate::{Command, ConfigArgs};

/// Suffixes of the `--dump-intermediates` files, in the order written.
pub const INTERMEDIATE_SUFFIXES: [&str; 4] = ["_R", "_I", "_I_hat", "_I_bar"];

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { cfg, out, ckpt } => cmd_train(&cfg, out, ckpt),
        Command::Enhance { input, ckpt, out, dump_intermediates, cfg } => {
            cmd_enhance(&input, &ckpt, &out, dump_intermediates, &cfg)
        }
        Command::Eval { cfg, ckpt, identity, out } => cmd_eval(&cfg, ckpt, identity, out),
        Command::Ablate { cfg, variants, out } => cmd_ablate(&cfg, &variants, out),
        Command::Info { cfg, ckpt, resolution } => cmd_info(&cfg, ckpt, &resolution),
    }
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    if let Some(p) = &args.config {
        if !p.is_file() {
            return Err(Error::Config(format!("configuration file {} does not exist", p.display())));
        }
    }
    let mut cfg = RunConfig::resolve(args.config.as_deref(), &args.overrides)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// True when the user said anything about the model, so a checkpoint must
/// agree with it.
fn model_specified(args: &ConfigArgs) -> bool {
    args.config.is_some() || args.overrides.iter().any(|o| o.trim_start().starts_with("model."))
}

fn load_checkpoint(path: &Path, args: &ConfigArgs, cfg: &RunConfig) -> Result<Checkpoint> {
    if model_specified(args) {
        Checkpoint::load_for(path, &cfg.model)
    } else {
        Checkpoint::load(path)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let split = load_dataset(&cfg.dataset.root, cfg.dataset.name, &cfg.dataset.load_options())?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!("dataset {}: {} train / {} test pairs", split.name, split.train.len(), split.test.len());
    Ok(split)
}

fn cmd_train(args: &ConfigArgs, out: Option<PathBuf>, resume: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(args)?;
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let split = load_split(&cfg)?;
    let objective = cfg.objective()?;
    let tc = cfg.train_config();
    let session = match &resume {
        Some(p) => Session::from_checkpoint(Checkpoint::load_for(p, &cfg.model)?)?,
        None => Session::new(cfg.model, &tc)?,
    };
    create_dir(&out_dir)?;
    write_file(&out_dir.join("config.toml"), &cfg.to_toml())?;
    let log_path = out_dir.join("loss.log");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let mut log_err = None;
    let result = train(session, &split.train, &split.test, &cfg.schedule, &objective, &tc, Some(&out_dir), |r| {
        println!("{r}");
        if let Err(e) = writeln!(log, "{r}") {
            log_err.get_or_insert(e);
        }
    });
    let flushed = log.flush();
    let outcome = result?;
    if let Some(e) = log_err {
        return Err(io_err(&log_path, e));
    }
    flushed.map_err(|e| io_err(&log_path, e))?;

    let mut summary = String::new();
    let s = &outcome.session;
    summary += &format!("steps={}\nepochs={}\n", s.step, s.epoch);
    if let Some(l) = outcome.losses.last() {
        summary += &format!("final_loss={l}\n");
    }
    if let Some(p) = &outcome.checkpoints.last_good {
        summary += &format!("checkpoint={}\n", p.display());
    }
    if let Some((p, psnr)) = &outcome.checkpoints.best {
        summary += &format!("best_checkpoint={}\nbest_psnr_db={psnr}\n", p.display());
    }
    if let Some(r) = &outcome.report {
        r.save(&out_dir.join("report.txt"))?;
        summary += &format!("test_psnr_db={}\ntest_ssim={}\n", r.psnr_db, r.ssim);
    }
    write_file(&out_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn image_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::Config(format!("input {} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| io_err(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no images in {}", input.display())));
    }
    Ok(files)
}

fn cmd_enhance(input: &Path, ckpt: &Path, out: &Path, dump: bool, args: &ConfigArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let ck = load_checkpoint(ckpt, args, &cfg)?;
    let (net, _) = Network::build::<f32>(ck.model)?;
    let inputs = image_inputs(input)?;
    create_dir(out)?;
    for path in &inputs {
        let x = image_io::read_tensor::<f32>(path)?;
        let (h, w) = (x.shape().h, x.shape().w);
        let st = net.enhance_stages(&ck.params, &pad_reflect(&x, 4, 8))?;
        let crop = |t| image_io::crop(t, h, w);
        let name = path.file_name().expect("input files have names");
        image_io::write_tensor(&out.join(name), &crop(&st.output)?)?;
        println!("{}", out.join(name).display());
        if dump {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let maps = [&st.reflectance, &st.illumination, &st.attended, &st.refined];
            for (suffix, t) in INTERMEDIATE_SUFFIXES.iter().zip(maps) {
                let p = out.join(format!("{stem}{suffix}.png"));
                image_io::write_tensor(&p, &crop(t)?)?;
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn cmd_eval(args: &ConfigArgs, ckpt: Option<PathBuf>, identity: bool, out: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(args)?;
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let split = load_split(&cfg)?;
    let report: MetricReport = match (identity, &ckpt) {
        (true, _) => evaluate_with(&split.test, |s| s.crop_valid(s.high.tensor()))?,
        (false, Some(p)) => {
            let session = Session::from_checkpoint(load_checkpoint(p, args, &cfg)?)?;
            session.evaluate(&split.test)?
        }
        (false, None) => return Err(Error::Config("eval needs --ckpt or --identity".into())),
    };
    create_dir(&out_dir)?;
    let path = out_dir.join("report.txt");
    report.save(&path)?;
    print!("{}", report.table());
    println!("psnr_db={} ssim={}", report.psnr_db, report.ssim);
    println!("report: {}", path.display());
    Ok(())
}

fn cmd_ablate(args: &ConfigArgs, names: &[String], out: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(args)?;
    let variants: Vec<Variant> = match names.is_empty() {
        true => Variant::ALL.to_vec(),
        false => names.iter().map(|n| n.trim().parse()).collect::<Result<_>>()?,
    };
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let split = load_split(&cfg)?;
    let objective = cfg.objective()?;
    let report = run_ablation(&split, cfg.model, &variants, &cfg.schedule, &objective, &cfg.train_config(), |v, r| {
        eprintln!("[{v}] {r}")
    })?;
    create_dir(&out_dir)?;
    let table = report.table();
    write_file(&out_dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("resolution `{s}` is not of the form WxH (e.g. 224x224)"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

fn cmd_info(args: &ConfigArgs, ckpt: Option<PathBuf>, resolution: &str) -> Result<()> {
    let cfg = resolve(args)?;
    let (w, h) = parse_resolution(resolution)?;
    let model = match &ckpt {
        Some(p) => load_checkpoint(p, args, &cfg)?.model,
        None => cfg.model,
    };
    print!("{}", count_flops(&model, h, w)?.table());
    Ok(())
}
