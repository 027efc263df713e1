use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use xkv_core::analysis::{cka_matrix, cosine_similarity_matrix, rank_curve, RankCurve, SimilarityMatrix};
use xkv_core::atteval::{FidelityReport, QuerySource, Reference, CSV_HEADER, DEFAULT_QUERY_WINDOW};
use xkv_core::compress::codec::{decode_compressed, encode_compressed, payload_prompt_elements, read_compressed};
use xkv_core::compress::{
    compress, compression_rate, layer_errors, rank_for_rate, reconstruct, value_rank_for, CompressionPlan, Method,
    DEFAULT_KV_RANK_RATIO,
};
use xkv_core::error::XkvError;
use xkv_core::kvdump::{read_dump, synth_dump, write_dump, CacheDump, CacheMeta, Side, SynthConfig};
use xkv_core::linalg::SvdPolicy;

use crate::args::{AnalyzeArgs, Command, CompressArgs, EvalArgs, ReportArgs, SynthArgs, RANK_KEYS};
use crate::config::{read_config_file, resolve};
use crate::error::{CliError, Result};

pub const DUMP_FILE: &str = "dump.kvd";
pub const COMPRESSED_FILE: &str = "compressed.xkv";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Analyze(a) => analyze(a),
        Command::Compress(a) => compress_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    }
}

fn load<T>(config: &Option<PathBuf>, flags: &impl Serialize, exclusive: &[&str]) -> Result<T>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let file = config.as_deref().map(read_config_file).transpose()?;
    resolve(file, flags, exclusive)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Config(format!("missing required option {key}")))
}

fn with_path<T>(path: &Path, r: xkv_core::error::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        XkvError::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}

fn open_dump(p: &Option<PathBuf>) -> Result<CacheDump> {
    let path = required(p, "input")?;
    with_path(path, read_dump(path))
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Option<PathBuf>) -> Result<Self> {
        let dir = required(dir, "out_dir")?.to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self { dir, written: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, data).map_err(|e| CliError::io(&path, e))
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    fn finish(mut self, command: &str, config: &impl Serialize) -> Result<()> {
        let manifest = serde_json::json!({
            "tool": "xkv",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config": config,
            "artifacts": self.written.clone(),
        });
        self.json("manifest.json", &manifest)
    }
}

#[derive(Debug, Serialize, Deserialize, Default)]
struct SynthRun {
    out_dir: Option<PathBuf>,
    #[serde(flatten)]
    synth: SynthConfig,
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg: SynthRun = load(&args.common.config, &args, &[])?;
    let mut out = Outputs::new(&cfg.out_dir)?;
    let dump = synth_dump(&cfg.synth)?;
    let path = out.path(DUMP_FILE);
    with_path(&path, write_dump(&dump, &path))?;
    out.finish("synth", &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum AnalysisKind {
    All,
    Cosine,
    Cka,
    Rank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SideChoice {
    Key,
    Value,
    Both,
}

impl SideChoice {
    fn sides(self) -> &'static [Side] {
        match self {
            SideChoice::Key => &[Side::Key],
            SideChoice::Value => &[Side::Value],
            SideChoice::Both => &Side::BOTH,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnalyzeRun {
    input: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    kind: AnalysisKind,
    side: SideChoice,
    energy_fraction: f64,
    /// Defaults to the powers of two up to the layer count.
    group_sizes: Option<Vec<usize>>,
}

impl Default for AnalyzeRun {
    fn default() -> Self {
        Self {
            input: None,
            out_dir: None,
            kind: AnalysisKind::All,
            side: SideChoice::Both,
            energy_fraction: 0.95,
            group_sizes: None,
        }
    }
}

#[derive(Serialize)]
struct AnalysisOutput {
    cosine: Vec<SimilarityMatrix>,
    cka: Vec<SimilarityMatrix>,
    rank_curve: Option<RankCurve>,
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let cfg: AnalyzeRun = load(&args.common.config, &args, &[])?;
    let dump = open_dump(&cfg.input)?;
    let mut out = Outputs::new(&cfg.out_dir)?;
    let wants = |k: AnalysisKind| cfg.kind == AnalysisKind::All || cfg.kind == k;
    let mut result = AnalysisOutput { cosine: Vec::new(), cka: Vec::new(), rank_curve: None };
    for &side in cfg.side.sides() {
        if wants(AnalysisKind::Cosine) {
            let m = cosine_similarity_matrix(&dump, side)?;
            out.bytes(&format!("cosine_{}.csv", side.name()), m.to_csv().as_bytes())?;
            result.cosine.push(m);
        }
        if wants(AnalysisKind::Cka) {
            let m = cka_matrix(&dump, side)?;
            out.bytes(&format!("cka_{}.csv", side.name()), m.to_csv().as_bytes())?;
            result.cka.push(m);
        }
    }
    if wants(AnalysisKind::Rank) {
        let n = dump.meta.num_layers;
        let sizes = cfg
            .group_sizes
            .clone()
            .unwrap_or_else(|| std::iter::successors(Some(1usize), |g| Some(g * 2)).take_while(|&g| g <= n).collect());
        let curve = rank_curve(&dump, &sizes, cfg.energy_fraction)?;
        out.bytes("rank_curve.csv", curve.to_csv().as_bytes())?;
        result.rank_curve = Some(curve);
    }
    out.json("analysis.json", &result)?;
    out.finish("analyze", &cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanConfig {
    method: Method,
    group_size: usize,
    rank: Option<usize>,
    value_rank: Option<usize>,
    target_rate: Option<f64>,
    kv_rank_ratio: f64,
    slerp_t: f64,
    slerp_start: Option<usize>,
    rate_context: Option<usize>,
    seed: u64,
    svd: SvdPolicy,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            method: Method::Xkv,
            group_size: 4,
            rank: None,
            value_rank: None,
            target_rate: None,
            kv_rank_ratio: DEFAULT_KV_RANK_RATIO,
            slerp_t: 0.5,
            slerp_start: None,
            rate_context: None,
            seed: 0,
            svd: SvdPolicy::default(),
        }
    }
}

impl PlanConfig {
    /// Metadata used for rate accounting.
    fn rate_meta(&self, meta: &CacheMeta) -> Result<CacheMeta> {
        match self.rate_context {
            Some(0) => Err(CliError::Config("rate_context must be positive".into())),
            Some(l) => Ok(CacheMeta { seq_len: l, ..meta.clone() }),
            None => Ok(meta.clone()),
        }
    }

    fn plan(&self, meta: &CacheMeta) -> Result<CompressionPlan> {
        let rank_given = self.rank.is_some() || self.value_rank.is_some() || self.target_rate.is_some();
        match self.method {
            Method::None if !rank_given => Ok(CompressionPlan::none()),
            Method::Slerp if !rank_given => {
                Ok(CompressionPlan { seed: self.seed, ..CompressionPlan::slerp(self.slerp_start, self.slerp_t) })
            }
            Method::None | Method::Slerp => {
                Err(CliError::Config(format!("rank and target_rate do not apply to method {}", self.method.name())))
            }
            Method::Xkv | Method::SingleSvd => {
                let g = if self.method == Method::Xkv { self.group_size } else { 1 };
                let (key_rank, value_rank) = match (self.rank, self.value_rank, self.target_rate) {
                    (_, _, Some(_)) if self.rank.is_some() || self.value_rank.is_some() => {
                        return Err(CliError::Config("rank and target_rate are mutually exclusive".into()))
                    }
                    (None, None, Some(t)) => rank_for_rate(t, &self.rate_meta(meta)?, g, self.kv_rank_ratio)?,
                    (Some(r), v, None) => (r, v.unwrap_or_else(|| value_rank_for(r, self.kv_rank_ratio))),
                    (None, Some(_), None) => return Err(CliError::Config("value_rank requires rank".into())),
                    _ => {
                        return Err(CliError::Config(format!(
                            "method {} needs rank or target_rate",
                            self.method.name()
                        )))
                    }
                };
                Ok(CompressionPlan {
                    method: self.method,
                    group_size: g,
                    key_rank,
                    value_rank,
                    kv_rank_ratio: self.kv_rank_ratio,
                    svd: self.svd,
                    seed: self.seed,
                    ..CompressionPlan::none()
                })
            }
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CompressRun {
    input: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    #[serde(flatten)]
    plan: PlanConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompressSummary {
    pub method: Method,
    pub group_size: usize,
    pub key_rank: usize,
    pub value_rank: usize,
    pub kv_rank_ratio: f64,
    pub target_rate: Option<f64>,
    /// Context length behind `compression_rate`.
    pub rate_context_len: usize,
    pub compression_rate: f64,
    /// Element counts of this dump's prompt region, as stored.
    pub original_elements: u64,
    pub stored_elements: u64,
    pub stored_rate: f64,
    pub mean_key_rel_err: f64,
    pub mean_value_rel_err: f64,
    pub file_bytes: u64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn compress_cmd(args: CompressArgs) -> Result<()> {
    let cfg: CompressRun = load(&args.common.config, &args, &RANK_KEYS)?;
    let dump = open_dump(&cfg.input)?;
    let plan = cfg.plan.plan(&dump.meta)?;
    let rate_meta = cfg.plan.rate_meta(&dump.meta)?;
    let mut out = Outputs::new(&cfg.out_dir)?;
    let bytes = encode_compressed(&compress(&dump, &plan)?)?;
    let stored = reconstruct(&decode_compressed(&bytes)?);
    let m = &dump.meta;
    let original = 2 * (m.num_layers * m.seq_len * m.width()) as u64;
    let stored_elements = payload_prompt_elements(&bytes)?;
    let summary = CompressSummary {
        method: plan.method,
        group_size: plan.effective_group_size(),
        key_rank: plan.key_rank,
        value_rank: plan.value_rank,
        kv_rank_ratio: plan.kv_rank_ratio,
        target_rate: cfg.plan.target_rate,
        rate_context_len: rate_meta.seq_len,
        compression_rate: compression_rate(&plan, &rate_meta)?,
        original_elements: original,
        stored_elements,
        stored_rate: original as f64 / stored_elements as f64,
        mean_key_rel_err: mean(&layer_errors(&dump, &stored, Side::Key)),
        mean_value_rel_err: mean(&layer_errors(&dump, &stored, Side::Value)),
        file_bytes: bytes.len() as u64,
    };
    out.bytes(COMPRESSED_FILE, &bytes)?;
    out.json("summary.json", &summary)?;
    out.finish("compress", &cfg)
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalRun {
    input: Option<PathBuf>,
    compressed: Vec<PathBuf>,
    out_dir: Option<PathBuf>,
    query_seed: u64,
    query_len: usize,
    query_heads_per_kv: usize,
    #[serde(flatten)]
    plan: PlanConfig,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            input: None,
            compressed: Vec::new(),
            out_dir: None,
            query_seed: 0,
            query_len: DEFAULT_QUERY_WINDOW,
            query_heads_per_kv: 2,
            plan: PlanConfig::default(),
        }
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg: EvalRun = load(&args.common.config, &args, &RANK_KEYS)?;
    let dump = open_dump(&cfg.input)?;
    let queries = match &dump.queries {
        Some(q) => QuerySource::Provided(q.clone()),
        None => {
            QuerySource::Synthetic { seed: cfg.query_seed, heads_per_kv: cfg.query_heads_per_kv, len: cfg.query_len }
        }
    };
    let mut out = Outputs::new(&cfg.out_dir)?;
    let reference = Reference::new(&dump, &queries)?;
    let mut reports: Vec<FidelityReport> = Vec::new();
    if cfg.compressed.is_empty() {
        let plan = cfg.plan.plan(&dump.meta)?;
        reports.push(reference.compare_compressed(&compress(&dump, &plan)?)?);
    } else {
        for path in &cfg.compressed {
            let cd = with_path(path, read_compressed(path))?;
            if cd.meta != dump.meta {
                return Err(CliError::Config(format!("{} was not produced from this dump", path.display())));
            }
            reports.push(reference.compare_compressed(&cd)?);
        }
    }
    if cfg.plan.rate_context.is_some() {
        let meta = cfg.plan.rate_meta(&dump.meta)?;
        for r in &mut reports {
            r.compression_rate = compression_rate(&r.plan, &meta)?;
        }
    }
    let mut csv = format!("{CSV_HEADER}\n");
    for r in &reports {
        csv.push_str(&r.csv_rows());
    }
    out.json("fidelity.json", &reports)?;
    out.bytes("fidelity.csv", csv.as_bytes())?;
    out.finish("eval", &cfg)
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ReportRun {
    inputs: Vec<PathBuf>,
    out_dir: Option<PathBuf>,
}

pub const REPORT_HEADER: &str = "method,compression_rate,group_size,key_rank,value_rank,mean_key_rel_err,mean_value_rel_err,mean_attn_out_rel_err,mean_attn_out_cos,source";

fn report(args: ReportArgs) -> Result<()> {
    let cfg: ReportRun = load(&args.common.config, &args, &[])?;
    if cfg.inputs.is_empty() {
        return Err(CliError::Config("report needs at least one fidelity.json".into()));
    }
    let mut rows: Vec<(FidelityReport, String)> = Vec::new();
    for path in &cfg.inputs {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let value: Value = serde_json::from_str(&text)?;
        let reports: Vec<FidelityReport> = match value {
            Value::Array(_) => serde_json::from_value(value)?,
            other => vec![serde_json::from_value(other)?],
        };
        rows.extend(reports.into_iter().map(|r| (r, path.display().to_string())));
    }
    rows.sort_by(|(a, sa), (b, sb)| {
        a.plan
            .method
            .name()
            .cmp(b.plan.method.name())
            .then(a.compression_rate.total_cmp(&b.compression_rate))
            .then(a.plan.effective_group_size().cmp(&b.plan.effective_group_size()))
            .then(a.plan.key_rank.cmp(&b.plan.key_rank))
            .then(sa.cmp(sb))
    });
    let mut csv = format!("{REPORT_HEADER}\n");
    for (r, source) in &rows {
        let p = &r.plan;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            p.method.name(),
            r.compression_rate,
            p.effective_group_size(),
            p.key_rank,
            p.value_rank,
            r.mean_key_rel_err,
            r.mean_value_rel_err,
            r.mean_attn_out_rel_err,
            r.mean_attn_out_cos,
            source
        ));
    }
    let mut out = Outputs::new(&cfg.out_dir)?;
    out.bytes("comparison.csv", csv.as_bytes())?;
    out.finish("report", &cfg)
}
