use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use textpose::data::{class_prototypes, ingest_coco, load_dataset, save_dataset, synth_dataset, Dataset, SyntheticSpec};
use textpose::eval::{self, EvalOptions, SweepPoint};
use textpose::model::{Checkpoint, Networks, NOISE_DIM};
use textpose::posecodec::{extract_pose, pose_to_svg, KeypointPose};
use textpose::textenc::{embed_sentence, EMBED_DIM};
use textpose::training::{append_loss_csv, randn, Phase, Trainer, Variant};
use textpose_tensor::Tensor;

use crate::config::{write_snapshot, RunConfig, TextConfig};
use crate::{CliError, EvalArgs, GenerateArgs, IngestArgs, InterpolateArgs, RenderArgs, SynthArgs, TextArgs, TrainArgs};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| textpose::Error::io(path, e).into()
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io(dir))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io(path))
}

fn json_pretty(value: &impl Serialize) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))
}

impl TextArgs {
    fn override_config(&self) -> Option<TextConfig> {
        match (&self.vectors, self.hashed_text) {
            (Some(path), _) => Some(TextConfig::Vectors { path: path.clone(), vocab_limit: self.vocab_limit }),
            (None, Some(seed)) => Some(TextConfig::Hashed { seed }),
            (None, None) => None,
        }
    }
}

/// Flags first, then the backend recorded in the checkpoint, then the
/// default hashed backend.
fn resolve_text(args: &TextArgs, ck: &Checkpoint) -> Result<TextConfig, CliError> {
    if let Some(t) = args.override_config() {
        return Ok(t);
    }
    match ck.meta.config.pointer("/run/text") {
        Some(v) if !v.is_null() => serde_json::from_value(v.clone())
            .map_err(|e| CliError::Invalid(format!("checkpoint records an unreadable text backend: {e}"))),
        _ => Ok(TextConfig::default()),
    }
}

fn load_networks(path: &Path) -> Result<(Networks, Checkpoint), CliError> {
    let ck = Checkpoint::load(path)?;
    let nets = Networks::from_checkpoint(&ck, ck.meta.variant == Variant::Regression.name())?;
    Ok((nets, ck))
}

#[derive(Serialize)]
struct Snapshot<'a, A: Serialize> {
    command: &'a str,
    args: &'a A,
    text: Option<&'a TextConfig>,
    checkpoint: Option<CheckpointInfo<'a>>,
}

#[derive(Serialize)]
struct CheckpointInfo<'a> {
    variant: &'a str,
    phase: u8,
    step: u64,
    architecture_hash: &'a str,
}

impl<'a> CheckpointInfo<'a> {
    fn of(ck: &'a Checkpoint) -> Self {
        Self { variant: &ck.meta.variant, phase: ck.meta.phase, step: ck.meta.step, architecture_hash: &ck.meta.architecture_hash }
    }
}

/// `<file>.config.toml` next to a single output file.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.toml");
    PathBuf::from(s)
}

pub fn ingest(a: IngestArgs) -> Result<(), CliError> {
    if a.split != "train" && a.split != "val" {
        return Err(CliError::Invalid(format!("split must be train or val, got {:?}", a.split)));
    }
    let ingested = ingest_coco(&a.keypoints, &a.captions, &a.split, a.min_visible)?;
    let samples = ingested.samples.iter().map(|s| s.to_sample()).collect::<Result<Vec<_>, _>>()?;
    let mut data = if a.out.exists() { load_dataset(&a.out)? } else { Dataset { train: vec![], val: vec![] } };
    let n = samples.len();
    if a.split == "train" {
        data.train = samples;
    } else {
        data.val = samples;
    }
    save_dataset(&a.out, &data)?;
    write_snapshot(&sidecar(&a.out), &Snapshot { command: "ingest", args: &a, text: None, checkpoint: None })?;
    let c = &ingested.counts;
    println!("annotations            {}", c.annotations);
    println!("images with people     {}", c.images);
    println!("single-person images   {}", c.single_person_images);
    println!("dropped, few keypoints {}", c.dropped_few_keypoints);
    println!("dropped, no caption    {}", c.dropped_no_caption);
    println!("kept                   {}", c.kept);
    println!("wrote {n} {} samples to {}", a.split, a.out.display());
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let data = synth_dataset(&SyntheticSpec::three_class(a.per_class, a.seed))?;
    save_dataset(&a.out, &data)?;
    write_snapshot(&sidecar(&a.out), &Snapshot { command: "synth", args: &a, text: None, checkpoint: None })?;
    println!("wrote {} train and {} val samples to {}", data.train.len(), data.val.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSnapshot<'a> {
    command: &'a str,
    args: &'a TrainArgs,
    resolved: &'a RunConfig,
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut run = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let variant = Variant::parse(&a.variant)?;
    let phase = Phase::from_number(a.phase)?;
    run.train.variant = variant;
    run.train.phase = phase;
    if let Some(s) = a.steps {
        run.train.steps = s;
    }
    if let Some(l) = a.lambda {
        run.train.lambda = Some(l);
    }
    if let Some(b) = a.batch_size {
        run.train.batch_size = b;
    }
    if let Some(l) = a.lr {
        run.train.lr = l;
    }
    if let Some(s) = a.seed.or(run.seed) {
        run.train.seed = s;
    }
    run.seed = Some(run.train.seed);
    if let Some(m) = &a.model {
        run.model = None;
        run.model_preset = Some(m.clone());
    }
    if let Some(t) = a.text.override_config() {
        run.text = t;
    }
    run.data = a.data.clone().or(run.data);
    run.out = Some(a.out.clone().or(run.out.clone()).unwrap_or_else(|| PathBuf::from("runs")));
    let data_path = run.data.clone().ok_or_else(|| CliError::Invalid("no dataset: pass --data or set data in the config".into()))?;
    let out = run.out.clone().expect("set above");
    if phase == Phase::Conditional && a.resume.is_none() && !a.from_scratch {
        return Err(CliError::Invalid("phase 2 needs --resume <phase-1 checkpoint> or --from-scratch".into()));
    }

    let regression = variant == Variant::Regression;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let explicit_model = run.model.is_some() || run.model_preset.is_some();
    let model = match &resume {
        Some(ck) if !explicit_model => ck.meta.model.clone(),
        _ => run.model_config()?,
    };
    model.validate()?;
    run.model = Some(model.clone());
    run.train.validate()?;
    run.train.lambda = Some(run.train.lambda());

    let mut nets = if regression { Networks::regression(&model, run.train.seed)? } else { Networks::heatmap(&model, run.train.seed)? };
    if let Some(ck) = &resume {
        let expected = nets.architecture_hash();
        if ck.meta.architecture_hash != expected {
            return Err(textpose::Error::ArchitectureMismatch { expected, found: ck.meta.architecture_hash.clone() }.into());
        }
        nets = Networks::from_checkpoint(ck, regression)?;
    }
    let data = load_dataset(&data_path)?;
    let vocab = match phase {
        Phase::Conditional => Some(run.text.load()?),
        Phase::Unconditional => None,
    };

    create_dir(&out)?;
    let stem = format!("{}-phase{}", variant.name(), phase.number());
    let config_path = out.join(format!("{stem}-config.toml"));
    write_snapshot(&config_path, &TrainSnapshot { command: "train", args: &a, resolved: &run })?;

    let info = json!({ "text": run.text, "model": model, "data": data_path });
    let mut trainer = Trainer::new(run.train.clone(), nets, &data.train, vocab.as_ref())?.with_run_info(info);
    let every = a.log_every;
    let reports = trainer.run(Some(&out), |r| {
        if every > 0 && (r.step as usize % every == 0) {
            eprintln!(
                "step {:>6}  d_loss {:>10.4}  g_loss {:>10.4}  penalty {:>9.5}  w {:>9.4}",
                r.step, r.d_loss, r.g_loss, r.penalty, r.wasserstein
            );
        }
    })?;
    let k = run.train.checkpoint_every;
    let ckpt = if k > 0 && run.train.steps % k == 0 && run.train.steps > 0 {
        out.join(format!("{stem}-step{:06}.ckpt", trainer.nets.generator_params().step()))
    } else {
        trainer.checkpoint(&out)?
    };
    let csv = out.join(format!("{stem}-loss.csv"));
    append_loss_csv(&csv, &reports)?;
    println!("checkpoint {}", ckpt.display());
    println!("losses     {}", csv.display());
    println!("config     {}", config_path.display());
    Ok(())
}

fn repeat_rows(h: &[f32], k: usize) -> Result<Tensor<f32>, CliError> {
    Ok(Tensor::new(vec![k, EMBED_DIM], h.iter().copied().cycle().take(k * EMBED_DIM).collect()).map_err(textpose::Error::from)?)
}

fn write_pose(dir: &Path, stem: &str, pose: &KeypointPose) -> Result<(), CliError> {
    write(&dir.join(format!("{stem}.svg")), pose_to_svg(pose))?;
    write(&dir.join(format!("{stem}.json")), json_pretty(pose)? + "\n")
}

pub fn generate(a: GenerateArgs) -> Result<(), CliError> {
    if a.k == 0 {
        return Err(CliError::Invalid("--k must be at least 1".into()));
    }
    let (nets, ck) = load_networks(&a.ckpt)?;
    let text = resolve_text(&a.text_backend, &ck)?;
    let vocab = text.load()?;
    let h = embed_sentence(&vocab, &a.text);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let z = randn(&[a.k, NOISE_DIM], &mut rng);
    let h = repeat_rows(h.as_slice(), a.k)?;
    create_dir(&a.out)?;
    let poses = match &nets {
        Networks::Heatmap { generator, .. } => {
            let stacks = generator.generate_batch(&z, &h)?;
            for (i, s) in stacks.iter().enumerate() {
                s.save_dump(a.out.join(format!("pose-{i}.hmp")))?;
            }
            stacks.iter().map(|s| extract_pose(s, a.threshold)).collect()
        }
        Networks::Regression { .. } => nets.sample_poses(&z, &h, a.threshold)?,
    };
    for (i, p) in poses.iter().enumerate() {
        write_pose(&a.out, &format!("pose-{i}"), p)?;
    }
    write_snapshot(
        &a.out.join("resolved-config.toml"),
        &Snapshot { command: "generate", args: &a, text: Some(&text), checkpoint: Some(CheckpointInfo::of(&ck)) },
    )?;
    println!("wrote {} poses to {}", poses.len(), a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let (nets, ck) = load_networks(&a.ckpt)?;
    let text = resolve_text(&a.text_backend, &ck)?;
    let vocab = text.load()?;
    let data = load_dataset(&a.data)?;
    let split = match a.split.as_str() {
        "val" => &data.val,
        "train" => &data.train,
        other => return Err(CliError::Invalid(format!("split must be val or train, got {other:?}"))),
    };
    if split.is_empty() {
        return Err(CliError::Invalid(format!("split {} of {} is empty", a.split, a.data.display())));
    }
    let options = EvalOptions {
        k: a.k,
        seed: a.seed,
        threshold: a.threshold,
        variant: ck.meta.variant.clone(),
        max_captions: a.max_captions,
    };
    let result = eval::evaluate(&nets, &data.train, split, &vocab, &options)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(&a.out, result.report.to_csv())?;
    if let Some(h) = &a.histograms {
        write(h, eval::histograms_csv(&eval::distance_histograms(&result.raw)))?;
    }
    let r = &result.report;
    println!("variant {}  k {}  generated poses {}", r.variant, r.k, r.samples);
    println!("against training poses:   d_p_nn {:>9.3}  d_p_tnn {:>9.3}  d_p_all {:>9.3}", r.d_p_nn, r.d_p_tnn, r.d_p_all);
    println!(
        "against validation poses: d_p_nn {:>9.3}  d_p_gt  {:>9.3}  d_p_all {:>9.3}  d_t_pnn {:>7.3}",
        r.d_p_nn_val, r.d_p_gt, r.d_p_all_val, r.d_t_pnn
    );
    let classes = data.train.iter().filter_map(|s| s.class).max().map(|c| c + 1);
    if let Some(n) = classes.filter(|_| split.iter().any(|s| s.class.is_some())) {
        let protos = class_prototypes(&data.train, n);
        let m = eval::class_match_on(&nets, split, &vocab, &protos, a.k, a.seed)?;
        println!("class match {m:.3}");
    }
    write_snapshot(
        &sidecar(&a.out),
        &Snapshot { command: "eval", args: &a, text: Some(&text), checkpoint: Some(CheckpointInfo::of(&ck)) },
    )?;
    Ok(())
}

pub fn interpolate(a: InterpolateArgs) -> Result<(), CliError> {
    let (nets, ck) = load_networks(&a.ckpt)?;
    let text = resolve_text(&a.text_backend, &ck)?;
    let vocab = text.load()?;
    let h1 = embed_sentence(&vocab, &a.text_a);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let points: Vec<SweepPoint> = if a.noise {
        let z = randn(&[2, NOISE_DIM], &mut rng);
        let (z1, z2) = z.data().split_at(NOISE_DIM);
        eval::noise_interpolation_sweep(&nets, &h1, z1, z2, a.threshold)?
    } else {
        let h2 = embed_sentence(&vocab, a.text_b.as_deref().expect("required without --noise"));
        let z = randn(&[1, NOISE_DIM], &mut rng);
        eval::interpolation_sweep(&nets, z.data(), &h1, &h2, a.threshold)?
    };
    create_dir(&a.out)?;
    for (i, p) in points.iter().enumerate() {
        write_pose(&a.out, &format!("interp-{i}-w{:.2}", p.weight), &p.pose)?;
    }
    let s = eval::sweep_smoothness(&points)?;
    write_snapshot(
        &a.out.join("resolved-config.toml"),
        &Snapshot { command: "interpolate", args: &a, text: Some(&text), checkpoint: Some(CheckpointInfo::of(&ck)) },
    )?;
    println!("wrote {} poses to {}", points.len(), a.out.display());
    println!("mean step distance {:.3}, endpoint distance {:.3}", s.adjacent_mean, s.endpoint);
    Ok(())
}

pub fn render(a: RenderArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.pose).map_err(io(&a.pose))?;
    let pose: KeypointPose = serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("{}: not a pose file: {e}", a.pose.display())))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(&a.out, pose_to_svg(&pose))?;
    write_snapshot(&sidecar(&a.out), &Snapshot { command: "render", args: &a, text: None, checkpoint: None })?;
    println!("wrote {}", a.out.display());
    Ok(())
}
