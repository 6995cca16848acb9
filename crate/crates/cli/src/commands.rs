use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use blurspace::imaging::{kernel_index_from_id, procedural_image, synthesize_dataset};
use blurspace::kernel_space::{load_checkpoint, train_kernel_space_from};
use blurspace::objectives::{CHARBONNIER, HYPER_LAPLACIAN, KERNEL_L2};
use blurspace::{
    convolve_blur, generate_motion_kernel, load_dataset, load_image, psnr, save_dataset, save_image, swap_dataset,
    transfer_blur, BlurKernel, ConvKernel, DeblurConfig, Deblurrer, Error, ImageTensor, KernelSpace, LossValue,
    RunConfig, RunPaths, TraceEntry, TrainState, TransferJob,
};
use serde::{Deserialize, Serialize};

use crate::table::Table;
use crate::{
    BudgetArgs, CmdResult, DeblurArgs, EvalArgs, Failure, RetrieveArgs, SwapArgs, SynthArgs, TrainArgs, TransferArgs,
};

/// Ground-truth kernels written next to a synthetic dataset. Pair ids carry
/// the index of their kernel.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelsFile {
    pub seed: u64,
    pub kernel_size: usize,
    pub trajectory_steps: usize,
    pub kernels: Vec<ConvKernel>,
}

pub const KERNELS_FILE: &str = "kernels.json";
pub const LOSS_CSV_HEADER: &str = "iteration,total,charbonnier,kernel_l2,hyper_laplacian";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn save_png(img: &ImageTensor, path: &Path) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    save_image(img, path)
}

/// Run `f` over `items` on up to `threads` scoped workers; output order
/// follows input order.
fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>, Error>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, Error> + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<R>, Error>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

// ---------------------------------------------------------------- synth

fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(index)
}

pub fn synth(a: SynthArgs) -> CmdResult {
    if a.count == 0 || a.kernels == 0 {
        return Err(usage("--count and --kernels must be ≥ 1"));
    }
    if a.size < 8 || a.size % 4 != 0 {
        return Err(usage(format!("--size must be ≥ 8 and divisible by 4, got {}", a.size)));
    }
    if a.kernel_size % 2 == 0 || a.kernel_size > a.size {
        return Err(usage(format!(
            "--kernel-size must be odd and at most --size, got {}",
            a.kernel_size
        )));
    }
    if a.channels != 1 && a.channels != 3 {
        return Err(usage(format!("--channels must be 1 or 3, got {}", a.channels)));
    }
    let sharps: Vec<ImageTensor> = (0..a.count)
        .map(|i| procedural_image(mix(a.seed, 1, i as u64), a.channels, a.size))
        .collect();
    let kernels = (0..a.kernels)
        .map(|j| generate_motion_kernel(mix(a.seed, 2, j as u64), a.kernel_size, a.trajectory_steps))
        .collect::<Result<Vec<_>, _>>()?;
    let data = synthesize_dataset(&sharps, &kernels, a.seed)?;
    save_dataset(&data, &a.out)?;
    let file = KernelsFile {
        seed: a.seed,
        kernel_size: a.kernel_size,
        trajectory_steps: a.trajectory_steps,
        kernels,
    };
    write_file(
        &a.out.join(KERNELS_FILE),
        &serde_json::to_string_pretty(&file).map_err(Error::from)?,
    )?;
    log::info!("wrote {} pairs to {}", data.len(), a.out.display());
    Ok(())
}

fn read_kernels(dir: &Path) -> Result<Option<Vec<ConvKernel>>, Error> {
    let path = dir.join(KERNELS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let file: KernelsFile =
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    file.kernels
        .into_iter()
        .map(|k| ConvKernel::new(k.height(), k.width(), k.weights().to_vec()))
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

// ---------------------------------------------------------------- train

fn checkpoint_dir(run: &Path, iteration: u64) -> PathBuf {
    run.join("checkpoints").join(format!("iter_{iteration}"))
}

/// Highest `checkpoints/iter_{n}` in a run directory.
fn latest_checkpoint(run: &Path) -> Result<Option<(u64, PathBuf)>, Error> {
    let dir = run.join("checkpoints");
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
        let path = entry.map_err(|e| io_err(&dir, e))?.path();
        let n = path
            .file_name()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("iter_"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(n) = n {
            if path.join("manifest.json").is_file() && best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, path));
            }
        }
    }
    Ok(best)
}

/// Accept a checkpoint directory or a run directory (latest checkpoint).
fn resolve_checkpoint(path: &Path) -> Result<PathBuf, Error> {
    if path.join("manifest.json").is_file() {
        return Ok(path.to_path_buf());
    }
    match latest_checkpoint(path)? {
        Some((_, dir)) => Ok(dir),
        None => Err(Error::Checkpoint(format!("no checkpoint found at {}", path.display()))),
    }
}

fn load_model(path: &Path) -> Result<(KernelSpace, RunConfig), Error> {
    KernelSpace::load(resolve_checkpoint(path)?)
}

fn loss_row(iteration: u64, loss: &LossValue) -> String {
    let term = |name| loss.term(name).unwrap_or(0.0);
    format!(
        "{iteration},{},{},{},{}",
        loss.value,
        term(CHARBONNIER),
        term(KERNEL_L2),
        term(HYPER_LAPLACIAN)
    )
}

/// Keep the header and the first `rows` data rows of `loss.csv`.
fn truncate_loss_csv(path: &Path, rows: u64) -> Result<(), Error> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines().take(rows as usize + 1) {
        kept.push(line.map_err(|e| io_err(path, e))?);
    }
    if kept.len() != rows as usize + 1 {
        return Err(Error::Checkpoint(format!(
            "{} has {} rows, checkpoint is at iteration {rows}",
            path.display(),
            kept.len().saturating_sub(1)
        )));
    }
    let mut text = kept.join("\n");
    text.push('\n');
    write_file(path, &text)
}

pub fn train(a: TrainArgs) -> CmdResult {
    let run: PathBuf;
    let mut cfg;
    let state;
    if a.resume {
        run = match (&a.out, &a.config) {
            (Some(out), _) => out.clone(),
            (None, Some(c)) => RunConfig::from_file(c)?
                .paths
                .out
                .map(PathBuf::from)
                .ok_or_else(|| usage("--resume needs --out or paths.out"))?,
            (None, None) => return Err(usage("--resume needs --out")),
        };
        cfg = RunConfig::from_file(run.join("config.json"))?;
        if let Some(n) = a.iters {
            cfg.optimizer.total_iters = n;
        }
        let (n, dir) = latest_checkpoint(&run)?
            .ok_or_else(|| Error::Checkpoint(format!("no checkpoint to resume in {}", run.display())))?;
        let mut s = load_checkpoint(&dir)?.into_train_state()?;
        s.augment = cfg.augment;
        if s.iteration != n {
            return Err(Error::Checkpoint(format!("{} records iteration {}", dir.display(), s.iteration)).into());
        }
        truncate_loss_csv(&run.join("loss.csv"), n)?;
        log::info!("resuming {} at iteration {n}", run.display());
        state = s;
    } else {
        cfg = match &a.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &a.data {
            cfg.paths.data = Some(d.to_string_lossy().into_owned());
        }
        if let Some(o) = &a.out {
            cfg.paths.out = Some(o.to_string_lossy().into_owned());
        }
        if let Some(n) = a.iters {
            cfg.optimizer.total_iters = n;
        }
        run = PathBuf::from(
            cfg.paths
                .out
                .clone()
                .ok_or_else(|| usage("missing --out (or paths.out)"))?,
        );
        if run.join("config.json").exists() {
            return Err(usage(format!(
                "{} already holds a run; pass --resume to continue it",
                run.display()
            )));
        }
        state = TrainState::new(cfg.arch, cfg.optimizer, cfg.seed, cfg.weights.eps_charbonnier)?
            .with_augmentation(cfg.augment);
    }
    if let Some(n) = a.iters {
        cfg.optimizer.total_iters = n;
    }
    cfg.validate()?;
    let data_dir = cfg
        .paths
        .data
        .clone()
        .ok_or_else(|| usage("missing --data (or paths.data)"))?;
    let data = load_dataset(&data_dir)?;
    if data.is_empty() {
        return Err(usage(format!("dataset {data_dir} is empty")));
    }
    fs::create_dir_all(&run).map_err(|e| io_err(&run, e))?;
    write_file(&run.join("config.json"), &cfg.to_json())?;

    let loss_path = run.join("loss.csv");
    let mut csv = if a.resume {
        fs::OpenOptions::new().append(true).open(&loss_path)
    } else {
        fs::File::create(&loss_path)
    }
    .map(BufWriter::new)
    .map_err(|e| io_err(&loss_path, e))?;
    if !a.resume {
        writeln!(csv, "{LOSS_CSV_HEADER}").map_err(|e| io_err(&loss_path, e))?;
    }

    let until = cfg.optimizer.total_iters;
    let every = cfg.checkpoint_every;
    // where a run lives is not model state; keeping it out of checkpoints lets
    // identical runs in different directories produce identical bytes
    let stored = RunConfig {
        paths: RunPaths::default(),
        ..cfg.clone()
    };
    let outcome = train_kernel_space_from(state, &data, until, |s, loss| {
        let t = s.iteration - 1;
        writeln!(csv, "{}", loss_row(t, loss)).map_err(|e| io_err(&loss_path, e))?;
        if s.iteration % every == 0 || s.iteration == until {
            csv.flush().map_err(|e| io_err(&loss_path, e))?;
            s.save(&stored, checkpoint_dir(&run, s.iteration))?;
            log::info!("iteration {}/{until}: charbonnier {:.6}", s.iteration, loss.value);
        }
        Ok(())
    });
    csv.flush().map_err(|e| io_err(&loss_path, e))?;
    let outcome = outcome?;
    log::info!("finished {} iterations in {}", outcome.state.iteration, run.display());
    Ok(())
}

// ---------------------------------------------------------------- deblur / retrieve

fn deblur_config(stored: &RunConfig, b: &BudgetArgs) -> Result<DeblurConfig, Failure> {
    let mut d = match &b.config {
        Some(path) => RunConfig::from_file(path)?.deblur,
        None => stored.deblur.clone(),
    };
    if let Some(n) = b.outer_iters {
        d.outer_iters = n;
    }
    if let Some(n) = b.inner_iters_first {
        d.inner_iters_first = n;
    }
    if let Some(n) = b.inner_iters_rest {
        d.inner_iters_rest = n;
    }
    if let Some(s) = b.seed {
        d.seed = s;
    }
    d.validate()?;
    Ok(d)
}

fn write_trace(path: &Path, trace: &[TraceEntry]) -> Result<(), Error> {
    let mut out = String::from("index,outer,phase,step,total,charbonnier,kernel_l2,hyper_laplacian,best\n");
    for (i, e) in trace.iter().enumerate() {
        let term = |name| e.loss.term(name).unwrap_or(0.0);
        out.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{}\n",
            e.outer,
            e.phase,
            e.step,
            e.loss.value,
            term(CHARBONNIER),
            term(KERNEL_L2),
            term(HYPER_LAPLACIAN),
            e.best
        ));
    }
    write_file(path, &out)
}

fn check_channels(img: &ImageTensor, model: &KernelSpace, what: &Path) -> Result<(), Failure> {
    let want = model.config().image_channels;
    if img.channels() != want {
        return Err(usage(format!(
            "{} has {} channels, model expects {want}",
            what.display(),
            img.channels()
        )));
    }
    Ok(())
}

pub fn deblur(a: DeblurArgs) -> CmdResult {
    let (model, stored) = load_model(&a.checkpoint)?;
    let cfg = deblur_config(&stored, &a.budget)?;
    let y = load_image(&a.input)?;
    check_channels(&y, &model, &a.input)?;
    let d = Deblurrer::new(&model.operator, &model.operator_params, cfg)?;
    match d.deblur(&y) {
        Ok(out) => {
            save_png(&out.image, &a.output)?;
            if let Some(t) = &a.trace {
                write_trace(t, &out.trace)?;
            }
            if let (Some(first), Some(last)) = (out.trace.first(), out.trace.last()) {
                log::info!(
                    "objective {:.6} -> best {:.6} over {} steps",
                    first.loss.value,
                    last.best,
                    out.trace.len()
                );
            }
            Ok(())
        }
        Err(aborted) => {
            if let Some(t) = &a.trace {
                write_trace(t, &aborted.trace)?;
            }
            Err(aborted.into())
        }
    }
}

#[derive(Serialize)]
struct KernelJson<'a> {
    shape: &'a [usize],
    data: &'a [f32],
}

fn write_kernel(path: &Path, k: &BlurKernel) -> Result<(), Error> {
    let json = KernelJson {
        shape: k.shape(),
        data: k.tensor().data(),
    };
    write_file(path, &serde_json::to_string(&json)?)
}

pub fn retrieve(a: RetrieveArgs) -> CmdResult {
    let (model, stored) = load_model(&a.checkpoint)?;
    let cfg = deblur_config(&stored, &a.budget)?;
    let x = load_image(&a.sharp)?;
    let y = load_image(&a.blurry)?;
    check_channels(&x, &model, &a.sharp)?;
    if x.shape() != y.shape() {
        return Err(usage(format!(
            "sharp {:?} and blurry {:?} shapes differ",
            x.shape(),
            y.shape()
        )));
    }
    let d = Deblurrer::new(&model.operator, &model.operator_params, cfg)?;
    let out = match d.retrieve_kernel(&x, &y) {
        Ok(out) => out,
        Err(aborted) => {
            if let Some(t) = &a.trace {
                write_trace(t, &aborted.trace)?;
            }
            return Err(aborted.into());
        }
    };
    if let Some(t) = &a.trace {
        write_trace(t, &out.trace)?;
    }
    if let Some(path) = &a.kernel_out {
        write_kernel(path, &out.kernel)?;
    }
    if let Some(path) = &a.output {
        save_png(&model.apply_blur(&x, &out.kernel)?.clamped(), path)?;
    }
    println!("baseline_psnr,recon_psnr");
    println!("{:.4},{:.4}", psnr(&x, &y)?, out.recon_psnr);
    Ok(())
}

// ---------------------------------------------------------------- transfer / swap

pub fn transfer(a: TransferArgs, threads: usize) -> CmdResult {
    let (model, _) = load_model(&a.checkpoint)?;
    let sharp = load_image(&a.sharp)?;
    let blurry = load_image(&a.blurry)?;
    let mut names = Vec::with_capacity(a.targets.len());
    let mut targets = Vec::with_capacity(a.targets.len());
    for path in &a.targets {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| usage(format!("bad target path {}", path.display())))?;
        if names.iter().any(|n| n == stem) {
            return Err(usage(format!("duplicate target name `{stem}`")));
        }
        names.push(stem.to_string());
        targets.push(load_image(path)?);
    }
    let chunk = targets.len().div_ceil(threads.max(1));
    let groups: Vec<&[ImageTensor]> = targets.chunks(chunk).collect();
    let outputs: Vec<ImageTensor> = par_map(&groups, threads, |group| {
        transfer_blur(&TransferJob {
            source_sharp: &sharp,
            source_blurry: &blurry,
            targets: group,
            model: &model,
        })
    })?
    .into_iter()
    .flatten()
    .collect();
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    for (name, img) in names.iter().zip(&outputs) {
        save_image(&img.clamped(), a.out.join(format!("{name}.png")))?;
    }
    log::info!("wrote {} images to {}", outputs.len(), a.out.display());
    Ok(())
}

pub fn swap(a: SwapArgs) -> CmdResult {
    let (model, _) = load_model(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    if data.is_empty() {
        return Err(usage(format!("dataset {} is empty", a.data.display())));
    }
    let swapped = swap_dataset(&data, &model, a.seed)?;
    let clamped = blurspace::PairedDataset::new(
        swapped
            .pairs()
            .iter()
            .map(|p| blurspace::Pair {
                id: p.id.clone(),
                sharp: p.sharp.clone(),
                blurry: p.blurry.clamped(),
            })
            .collect(),
    )?;
    save_dataset(&clamped, &a.out)?;
    log::info!("wrote {} swapped pairs to {}", clamped.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- eval

struct EvalRow {
    id: String,
    baseline: f64,
    recon: f64,
    /// `(baseline, transfer)` PSNR against the explicit-convolution oracle.
    transfer: Option<(f64, f64)>,
}

fn fmt_db(v: f64) -> String {
    format!("{v:.4}")
}

pub fn eval(a: EvalArgs, threads: usize) -> CmdResult {
    let (model, _) = load_model(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    if data.is_empty() {
        return Err(usage(format!("dataset {} is empty", a.data.display())));
    }
    let kernels = read_kernels(&a.data)?;
    let pairs = data.pairs();
    let n = pairs.len();
    let with_transfer = kernels.is_some() && n >= 2;
    let indices: Vec<usize> = (0..n).collect();
    let rows = par_map(&indices, threads, |&i| {
        let p = &pairs[i];
        let k = model.extract_kernel(&p.sharp, &p.blurry)?;
        let recon = psnr(&model.apply_blur(&p.sharp, &k)?, &p.blurry)?;
        let transfer = match (&kernels, with_transfer) {
            (Some(ks), true) => {
                let ki = kernel_index_from_id(&p.id)
                    .filter(|&ki| ki < ks.len())
                    .ok_or_else(|| Error::Dataset(format!("pair `{}` names no known kernel", p.id)))?;
                // Target: the next pair's sharp image, never seen with this blur.
                let target = &pairs[(i + 1) % n].sharp;
                let oracle = convolve_blur(target, &ks[ki])?;
                let moved = model.apply_blur(target, &k)?;
                Some((psnr(target, &oracle)?, psnr(&moved, &oracle)?))
            }
            _ => None,
        };
        Ok(EvalRow {
            id: p.id.clone(),
            baseline: psnr(&p.sharp, &p.blurry)?,
            recon,
            transfer,
        })
    })?;

    let mut headers = vec!["id", "baseline_psnr", "recon_psnr", "recon_gain"];
    if with_transfer {
        headers.extend(["transfer_baseline_psnr", "transfer_psnr", "transfer_gain"]);
    }
    let mut table = Table::new(&headers);
    let mean = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let mut push = |id: String, b: f64, r: f64, t: Option<(f64, f64)>| {
        let mut row = vec![id, fmt_db(b), fmt_db(r), fmt_db(r - b)];
        if let Some((tb, tp)) = t {
            row.extend([fmt_db(tb), fmt_db(tp), fmt_db(tp - tb)]);
        }
        table.push(row);
    };
    for r in &rows {
        push(r.id.clone(), r.baseline, r.recon, r.transfer);
    }
    let mean_transfer = with_transfer.then(|| {
        (
            mean(&|r: &EvalRow| r.transfer.map_or(0.0, |t| t.0)),
            mean(&|r: &EvalRow| r.transfer.map_or(0.0, |t| t.1)),
        )
    });
    push("mean".into(), mean(&|r| r.baseline), mean(&|r| r.recon), mean_transfer);

    print!("{}", table.to_aligned());
    if let Some(path) = &a.csv {
        write_file(path, &table.to_csv())?;
    }
    Ok(())
}
