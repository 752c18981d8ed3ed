//! Argument parsing and the subcommand implementations behind the `idlat` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use idlat::analysis::{
    gradient_kde, parse_isovalues, project_2d, select_representatives, sidecar_path,
    similarity_map, spectral_cluster, LatentTable, TsneConfig,
};
use idlat::blocking::{partition, sample_training_blocks, BlockSpec};
use idlat::codec::{compress_with_latents, decode_latents, decompress_latents, CompressedVolume};
use idlat::importance::{
    importance_from_isosurface, importance_from_region, importance_from_threshold,
    synth_training_map, ImportanceMap, TrainingMapKind, VoxelBox, DEFAULT_SLOPE,
};
use idlat::metrics::report;
use idlat::network::{Model, ModelConfig};
use idlat::training::{train, TrainConfig};
use idlat::volume::{load_raw, normalize, save_raw, Dims, Dtype, Volume, VolumeSource};
use idlat::Error;

use crate::render::{heatmap, png_bytes};

/// Failure of a subcommand: exit status plus a one-line JSON message on stderr.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            kind: "usage".into(),
            message: message.into(),
        }
    }

    pub fn to_json_line(&self) -> String {
        json!({ "error": self.kind, "message": self.message }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: 1,
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "idlat",
    version,
    about = "Importance-driven latent compression and analysis of volumes"
)]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an importance map and store it as a raw f32 volume.
    Importance(ImportanceArgs),
    /// Train a model on one volume and save the checkpoint.
    Train(TrainArgs),
    /// Compress a volume under an importance map.
    Compress(CompressArgs),
    /// Reconstruct a volume from a compressed file.
    Decompress(DecompressArgs),
    /// Quality and size report of a reconstruction.
    Metrics(MetricsArgs),
    /// Cluster and project the block latents of a compressed file.
    Analyze(AnalyzeArgs),
    /// Isosurface similarity map and representative isovalues.
    Isosim(IsosimArgs),
    /// Run the explorer HTTP service.
    Serve(ServeArgs),
}

/// Where a raw volume comes from: flags, or a JSON/TOML file with the keys
/// `path`, `dims`, `dtype` and `sentinel`.
#[derive(Debug, Clone, Args)]
pub struct VolumeArgs {
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    pub volume: Option<PathBuf>,
    /// Volume description file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `nx,ny,nz`. Inferred for cubic volumes when omitted.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<Dims>,
    #[arg(long, value_parser = parse_dtype, default_value = "f32le")]
    pub dtype: Dtype,
    /// Value marking invalid voxels.
    #[arg(long)]
    pub sentinel: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Ramp,
    Gaussian,
    Gradient,
    UniformRandom,
    Constant,
}

impl From<SynthKind> for TrainingMapKind {
    fn from(k: SynthKind) -> Self {
        match k {
            SynthKind::Ramp => TrainingMapKind::Ramp,
            SynthKind::Gaussian => TrainingMapKind::Gaussian,
            SynthKind::Gradient => TrainingMapKind::Gradient,
            SynthKind::UniformRandom => TrainingMapKind::UniformRandom,
            SynthKind::Constant => TrainingMapKind::Constant,
        }
    }
}

#[derive(Debug, Args)]
#[group(id = "map", required = true, multiple = false, args = ["isovalue", "reference", "region", "kind"])]
pub struct ImportanceArgs {
    #[command(flatten)]
    pub volume: VolumeArgs,
    /// Importance decays with distance to this isosurface.
    #[arg(long)]
    pub isovalue: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_SLOPE, requires = "isovalue")]
    pub slope: f64,
    /// Importance 1 where the value exceeds this reference.
    #[arg(long = "ref")]
    pub reference: Option<f64>,
    /// Importance 1 inside `x0,y0,z0,x1,y1,z1` (half-open).
    #[arg(long = "box", value_parser = parse_box)]
    pub region: Option<VoxelBox>,
    /// Synthetic training-style map drawn from `--seed`.
    #[arg(long, value_enum)]
    pub kind: Option<SynthKind>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 24³ padded blocks with three encoder stages.
    Default,
    /// 12³ padded blocks with two encoder stages.
    Desk,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub volume: VolumeArgs,
    /// Train on this fixed map instead of synthetic maps.
    #[arg(long)]
    pub importance: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    #[arg(long)]
    pub latent_channels: Option<usize>,
    /// Content edge of a block; defaults to the preset's.
    #[arg(long)]
    pub content: Option<usize>,
    #[arg(long)]
    pub pad: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Exponent of the distortion weights.
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_entropy: Option<f64>,
    /// Disable per-block loss balancing.
    #[arg(long)]
    pub no_balance: bool,
    /// Train on this many blocks drawn by entropy-aware sampling.
    #[arg(long)]
    pub sample: Option<usize>,
    /// High:low entropy ratio for `--sample`.
    #[arg(long, value_parser = parse_ratio, default_value = "3:1")]
    pub ratio: (usize, usize),
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Per-epoch CSV log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[command(flatten)]
    pub volume: VolumeArgs,
    /// Raw f32 importance map with the volume's dims (default: all ones).
    #[arg(long)]
    pub importance: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the latent table next to the output.
    #[arg(long)]
    pub sidecar: bool,
}

#[derive(Debug, Args)]
pub struct DecompressArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_dtype, default_value = "f32le")]
    pub dtype: Dtype,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub orig: PathBuf,
    #[arg(long)]
    pub recon: PathBuf,
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<Dims>,
    #[arg(long, value_parser = parse_dtype, default_value = "f32le")]
    pub dtype: Dtype,
    #[arg(long)]
    pub sentinel: Option<f64>,
    /// Raw f32 importance map (default: all ones).
    #[arg(long)]
    pub importance: Option<PathBuf>,
    /// Compressed file whose size gives the latent size ratio.
    #[arg(long)]
    pub compressed: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Spectral clusters over all blocks.
    #[arg(long, default_value_t = 2)]
    pub clusters: usize,
    /// t-SNE perplexity (default: a quarter of the block count, at most 30).
    #[arg(long)]
    pub perplexity: Option<f64>,
    /// Original volume, for the per-block gradient density report.
    #[arg(long)]
    pub volume: Option<PathBuf>,
    #[arg(long, value_parser = parse_dtype, default_value = "f32le")]
    pub dtype: Dtype,
    /// Store the latent table next to the input.
    #[arg(long)]
    pub sidecar: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IsosimArgs {
    #[command(flatten)]
    pub volume: VolumeArgs,
    /// `start:stop:step` (inclusive) or a comma-separated list.
    #[arg(long)]
    pub isovalues: String,
    /// Number of representative isovalues to pick.
    #[arg(long)]
    pub select: Option<usize>,
    /// Checkpoint to encode with. Without one a freshly initialized desk
    /// model seeded by `--seed` is used.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Similarity matrix as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Similarity heat map as PNG.
    #[arg(long)]
    pub png: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub cell: u32,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Root for every path named in requests.
    #[arg(long, env = "IDLAT_DATA_DIR", default_value = ".")]
    pub data_dir: PathBuf,
    /// Checkpoint used when a request names none.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    Dims::parse(s).map_err(|e| e.to_string())
}

fn parse_dtype(s: &str) -> std::result::Result<Dtype, String> {
    Dtype::parse(s).map_err(|e| e.to_string())
}

fn parse_box(s: &str) -> std::result::Result<VoxelBox, String> {
    VoxelBox::parse(s).map_err(|e| e.to_string())
}

fn parse_ratio(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("ratio must look like 3:1, got {s:?}"))?;
    let p = |x: &str| {
        x.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad ratio {s:?}: {e}"))
    };
    Ok((p(a)?, p(b)?))
}

/// Cubic dims from a file length, when the voxel count is a perfect cube.
fn infer_cube(path: &Path, dtype: Dtype) -> CliResult<Dims> {
    let len = fs::metadata(path)?.len() as usize;
    let voxels = len / dtype.size();
    let n = (voxels as f64).cbrt().round() as usize;
    if len.is_multiple_of(dtype.size()) && n > 0 && n * n * n == voxels {
        Ok(Dims::cube(n))
    } else {
        Err(CliError::usage(format!(
            "cannot infer dims of {} ({len} bytes); pass --dims",
            path.display()
        )))
    }
}

impl VolumeArgs {
    pub fn source(&self) -> CliResult<VolumeSource> {
        if let Some(cfg) = &self.config {
            let text = fs::read_to_string(cfg)?;
            let mut src: VolumeSource = match cfg.extension().and_then(|e| e.to_str()) {
                Some("toml") => toml::from_str(&text)
                    .map_err(|e| Error::Input(format!("{}: {e}", cfg.display())))?,
                _ => serde_json::from_str(&text)
                    .map_err(|e| Error::Input(format!("{}: {e}", cfg.display())))?,
            };
            if src.path.is_relative() {
                if let Some(dir) = cfg.parent() {
                    src.path = dir.join(&src.path);
                }
            }
            return Ok(src);
        }
        let path = self
            .volume
            .clone()
            .ok_or_else(|| CliError::usage("--volume or --config is required"))?;
        let dims = match self.dims {
            Some(d) => d,
            None => infer_cube(&path, self.dtype)?,
        };
        Ok(VolumeSource {
            path,
            dims: dims.0,
            dtype: self.dtype,
            sentinel: self.sentinel,
        })
    }

    pub fn load(&self) -> CliResult<Volume> {
        Ok(self.source()?.load()?)
    }
}

fn load_importance(path: Option<&Path>, v: &Volume) -> CliResult<ImportanceMap> {
    match path {
        Some(p) => {
            let raw = load_raw(p, v.dims, Dtype::F32le)?;
            Ok(ImportanceMap::from_volume(&raw)?.masked_by(v))
        }
        None => Ok(ImportanceMap::constant(v.dims, 1.0).masked_by(v)),
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Importance(a) => importance(a, seed),
        Command::Train(a) => train_cmd(a, seed),
        Command::Compress(a) => compress(a),
        Command::Decompress(a) => decompress(a),
        Command::Metrics(a) => metrics(a),
        Command::Analyze(a) => analyze(a, seed),
        Command::Isosim(a) => isosim(a, seed),
        Command::Serve(a) => serve(a),
    }
}

fn importance(a: ImportanceArgs, seed: u64) -> CliResult {
    let v = a.volume.load()?;
    let map = if let Some(iso) = a.isovalue {
        importance_from_isosurface(&v, iso, a.slope)?
    } else if let Some(r) = a.reference {
        importance_from_threshold(&v, r)
    } else if let Some(b) = &a.region {
        importance_from_region(&v, b)?
    } else if let Some(kind) = a.kind {
        synth_training_map(v.dims, kind.into(), seed, Some(&v))?
    } else {
        return Err(CliError::usage(
            "one of --isovalue, --ref, --box or --kind is required",
        ));
    };
    save_raw(&map.to_volume(), &a.out, Dtype::F32le)?;
    let n = map.values.len().max(1) as f64;
    emit(
        &json!({
            "out": a.out,
            "dims": v.dims.0,
            "mean": map.sum() / n,
            "important_fraction": map.values.iter().filter(|&&x| x > 0.5).count() as f64 / n,
        }),
        None,
    )
}

fn train_cmd(a: TrainArgs, seed: u64) -> CliResult {
    let v = a.volume.load()?;
    let mut config = match a.preset {
        Preset::Default => ModelConfig::default(),
        Preset::Desk => ModelConfig::desk(8),
    };
    let (content0, pad0) = match a.preset {
        Preset::Default => (16, 4),
        Preset::Desk => (8, 2),
    };
    let spec = BlockSpec::new(a.content.unwrap_or(content0), a.pad.unwrap_or(pad0))?;
    config.padded_edge = spec.padded();
    if let Some(k) = a.latent_channels {
        config.latent_channels = k;
        if let Some(last) = config.enc_layers.last_mut() {
            last.channels = k;
        }
    }
    config.seed = seed;
    let mut model = Model::new(config, spec)?;

    let (normalized, norm) = normalize(&v)?;
    model.normalization = Some(norm);
    let fixed = a.importance.is_some();
    let imp = load_importance(a.importance.as_deref(), &v)?;
    let mut blocks = partition(&normalized, &imp, &spec)?;
    if let Some(n) = a.sample {
        let (picked, rep) = sample_training_blocks(&blocks, &spec, n, a.ratio, 32, seed)?;
        log::info!(
            "sampled {} high and {} low entropy blocks",
            rep.high,
            rep.low
        );
        blocks = picked;
    }

    let mut cfg = TrainConfig {
        seed,
        fixed_importance: fixed,
        balance_blocks: !a.no_balance,
        checkpoint_dir: a.checkpoint_dir.clone(),
        log_path: a.log.clone(),
        ..Default::default()
    };
    if let Some(x) = a.epochs {
        cfg.epochs = x;
    }
    if let Some(x) = a.batch_size {
        cfg.batch_size = x;
    }
    if let Some(x) = a.lambda {
        cfg.lambda = x;
    }
    if let Some(x) = a.a {
        cfg.a = x;
    }
    if let Some(x) = a.lr {
        cfg.lr_main = x;
    }
    if let Some(x) = a.lr_entropy {
        cfg.lr_entropy = x;
    }
    let report = train(&blocks, &cfg, &mut model)?;
    model.save(&a.out)?;
    emit(
        &json!({
            "out": a.out,
            "model_hash": model.hash_hex(),
            "blocks": blocks.len(),
            "epochs": report.epochs,
        }),
        None,
    )
}

fn compress(a: CompressArgs) -> CliResult {
    let v = a.volume.load()?;
    let imp = load_importance(a.importance.as_deref(), &v)?;
    let model = Model::load(&a.model)?;
    let (file, latents, stats) = compress_with_latents(&v, &imp, &model)?;
    file.write(&a.out)?;
    let bytes = fs::metadata(&a.out)?.len();
    let sidecar = if a.sidecar {
        let p = sidecar_path(&a.out);
        LatentTable::from_latents(
            &latents,
            file.header.model_hash,
            format!("{}", a.out.display()),
        )?
        .save(&p)?;
        Some(p)
    } else {
        None
    };
    emit(
        &json!({
            "out": a.out,
            "bytes": bytes,
            "blocks": file.blocks.len(),
            "latent_size_ratio": v.raw_bytes_f32() as f64 / bytes as f64,
            "stats": stats,
            "sidecar": sidecar,
        }),
        None,
    )
}

fn decompress(a: DecompressArgs) -> CliResult {
    let file = CompressedVolume::read(&a.input)?;
    let model = Model::load(&a.model)?;
    let latents = decompress_latents(&file, &model)?;
    let v = decode_latents(&latents, &file.header, &model)?;
    save_raw(&v, &a.out, a.dtype)?;
    emit(
        &json!({ "out": a.out, "dims": v.dims.0, "blocks": latents.len() }),
        None,
    )
}

fn metrics(a: MetricsArgs) -> CliResult {
    let dims = match a.dims {
        Some(d) => d,
        None => infer_cube(&a.orig, a.dtype)?,
    };
    let src = |path: &Path| VolumeSource {
        path: path.to_path_buf(),
        dims: dims.0,
        dtype: a.dtype,
        sentinel: a.sentinel,
    };
    let orig = src(&a.orig).load()?;
    let recon = load_raw(&a.recon, dims, a.dtype)?;
    let imp = load_importance(a.importance.as_deref(), &orig)?;
    let size = a
        .compressed
        .as_deref()
        .map(|p| fs::metadata(p).map(|m| m.len()))
        .transpose()?;
    let r = report(&orig, &recon, &imp, size)?;
    emit(&r, a.out.as_deref())
}

#[derive(Serialize)]
struct AnalyzedBlock {
    row: usize,
    block: [usize; 3],
    cluster: usize,
    x: f64,
    y: f64,
}

fn analyze(a: AnalyzeArgs, seed: u64) -> CliResult {
    let file = CompressedVolume::read(&a.input)?;
    let model = Model::load(&a.model)?;
    let latents = decompress_latents(&file, &model)?;
    let table = LatentTable::from_latents(
        &latents,
        file.header.model_hash,
        format!("{}", a.input.display()),
    )?;
    if a.sidecar {
        table.save(sidecar_path(&a.input))?;
    }
    let n = table.len();
    let rows: Vec<&[f64]> = table.rows.iter().map(Vec::as_slice).collect();
    let labels = spectral_cluster(&rows, a.clusters, seed)?;
    let perplexity = a
        .perplexity
        .unwrap_or_else(|| (n as f64 / 4.0).clamp(1.0, 30.0).min(n as f64 - 1.0));
    let embedding = project_2d(&table, &TsneConfig::new(perplexity, seed))?;
    let kde = match &a.volume {
        Some(p) => {
            let v = load_raw(p, file.header.dims, a.dtype)?;
            Some(gradient_kde(&v, &file.header.spec, 256)?)
        }
        None => None,
    };
    let blocks: Vec<AnalyzedBlock> = (0..n)
        .map(|row| AnalyzedBlock {
            row,
            block: table.block_indices[row],
            cluster: labels[row],
            x: embedding.points[row][0],
            y: embedding.points[row][1],
        })
        .collect();
    emit(
        &json!({
            "input": a.input,
            "model_hash": idlat::network::hex(&table.model_hash),
            "block_count": n,
            "latent_len": table.row_len(),
            "clusters": a.clusters,
            "perplexity": perplexity,
            "seed": seed,
            "blocks": blocks,
            "gradient_kde": kde,
        }),
        a.out.as_deref(),
    )
}

fn isosim(a: IsosimArgs, seed: u64) -> CliResult {
    let v = a.volume.load()?;
    let isovalues = parse_isovalues(&a.isovalues).map_err(|e| CliError::usage(e.to_string()))?;
    let model = match &a.model {
        Some(p) => Model::load(p)?,
        None => {
            log::warn!("no --model given; encoding with an untrained desk model");
            let mut config = ModelConfig::desk(8);
            config.seed = seed;
            Model::new(config, BlockSpec::new(8, 2)?)?
        }
    };
    let map = similarity_map(&v, &isovalues, &model)?;
    let selected = match a.select {
        Some(n) => Some(select_representatives(&map, n)?),
        None => None,
    };
    if let Some(p) = &a.csv {
        fs::write(p, map.to_csv())?;
    }
    if let Some(p) = &a.png {
        fs::write(p, png_bytes(&heatmap(&map, a.cell))?)?;
    }
    let mut out = json!({ "isovalues": map.isovalues, "selected": selected });
    if a.csv.is_none() {
        out["matrix"] = json!(map.matrix);
    }
    emit(&out, None)
}

fn serve(a: ServeArgs) -> CliResult {
    if !a.data_dir.is_dir() {
        return Err(CliError::usage(format!(
            "data directory {} does not exist",
            a.data_dir.display()
        )));
    }
    let state = crate::service::AppState::new(a.data_dir, a.model);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(crate::service::serve(
        std::net::SocketAddr::new(a.host, a.port),
        state,
    ))?;
    Ok(())
}
