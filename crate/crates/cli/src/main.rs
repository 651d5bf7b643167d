//! Command-line driver: ingest, index, align, assign, evaluate, run, plus
//! synthetic scene sampling and loss checking. Exit code 0 means systemic
//! success; per-candidate failures are reported, not fatal.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use shapemat::camera::{build_viewpoint_grid, GridConfig};
use shapemat::densecrf::CrfBackend;
use shapemat::exemplar;
use shapemat::flowrefine::{
    compute_flow, encode_coordinate_silhouette, median_flow, warp_labels, write_flo, FlowParams,
};
use shapemat::hogindex::{build_reverse_index, invert_index, load_index, save_index};
use shapemat::img::Mask;
use shapemat::material::{
    finite_difference_error, load_material_library, random_loss_state, multitask_loss_uncertainty,
};
use shapemat::pipeline::{
    self, assign_parts, build_rendering_entries, evaluate, exemplar_descriptors, load_config,
    load_descriptors, load_exemplars, load_shapes, load_truth_manifest, make_classifier,
    run_pipeline, ClassifierChoice, CutoffDirection, MatcherChoice, PipelineConfig,
};
use shapemat::raster::{write_mask_png, LabelMap};
use shapemat::substance::{aggregate_part_substance, substance_index, SUBSTANCES};
use shapemat::synthgen::{emit_scene, sample_batch, SamplePair};

#[derive(Parser)]
#[command(
    name = "shapemat",
    version,
    about = "Assigns materials from a tagged library to segmented mesh parts, guided by exemplar photographs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize meshes and/or standardize exemplar photographs.
    Ingest(IngestArgs),
    /// Emit a deterministic viewpoint grid as JSON.
    Grid(GridArgs),
    /// Build, inspect, or invert the coarse retrieval index.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Compute silhouette flow between two masks and optionally warp labels.
    Align(AlignArgs),
    /// Assign materials to the parts of one refined label map.
    Assign(AssignArgs),
    /// Score stored descriptors against a ground-truth manifest.
    Evaluate(EvaluateArgs),
    /// Run the full batch pipeline into a run directory.
    Run(RunArgs),
    /// Sample randomized synthetic render configurations.
    #[command(subcommand)]
    Synthgen(SynthgenCmd),
    /// Numeric checks for the multitask loss.
    #[command(subcommand)]
    Loss(LossCmd),
}

fn main() {
    env_logger::init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Grid(args) => cmd_grid(args),
        Command::Index(cmd) => match cmd {
            IndexCmd::Build(args) => cmd_index_build(args),
            IndexCmd::Query(args) => cmd_index_query(args),
            IndexCmd::Invert(args) => cmd_index_invert(args),
            IndexCmd::Dump(args) => cmd_index_dump(args),
        },
        Command::Align(args) => cmd_align(args),
        Command::Assign(args) => cmd_assign(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Run(args) => cmd_run(args),
        Command::Synthgen(SynthgenCmd::Sample(args)) => cmd_synthgen_sample(args),
        Command::Loss(LossCmd::Check(args)) => cmd_loss_check(args),
    }
}

// ---------------------------------------------------------------------------
// shared flag groups

#[derive(Args)]
struct GridFlags {
    /// Named grid preset (`paper456`).
    #[arg(long)]
    preset: Option<String>,
    /// Number of elevation rings.
    #[arg(long)]
    n_elevations: Option<usize>,
    /// Azimuth count scale: a ring at elevation phi holds round(scale * sin(phi)) poses.
    #[arg(long)]
    azimuth_scale: Option<f64>,
    /// Minimum elevation in radians.
    #[arg(long)]
    phi_min: Option<f64>,
    /// Maximum elevation in radians.
    #[arg(long)]
    phi_max: Option<f64>,
    /// Camera distance for grid poses.
    #[arg(long)]
    grid_r: Option<f64>,
    /// Horizontal field of view in degrees for grid poses.
    #[arg(long)]
    grid_fov: Option<f64>,
}

impl GridFlags {
    fn apply(&self, grid: &mut GridConfig) -> Result<()> {
        if let Some(name) = &self.preset {
            *grid = GridConfig::preset(name)?;
        }
        if let Some(v) = self.n_elevations {
            grid.n_elevations = v;
        }
        if let Some(v) = self.azimuth_scale {
            grid.azimuth_scale = v;
        }
        if let Some(v) = self.phi_min {
            grid.phi_min = v;
        }
        if let Some(v) = self.phi_max {
            grid.phi_max = v;
        }
        if let Some(v) = self.grid_r {
            grid.r = v;
        }
        if let Some(v) = self.grid_fov {
            grid.fov_x = v;
        }
        Ok(())
    }
}

#[derive(Args)]
struct HogFlags {
    #[arg(long)]
    hog_cells_x: Option<usize>,
    #[arg(long)]
    hog_cells_y: Option<usize>,
    #[arg(long)]
    hog_bins: Option<usize>,
    /// Use signed gradient orientations over [0, 2pi).
    #[arg(long)]
    hog_signed: Option<bool>,
    #[arg(long)]
    hog_working_size: Option<usize>,
    #[arg(long)]
    hog_blur_sigma: Option<f32>,
}

impl HogFlags {
    fn apply(&self, hog: &mut shapemat::hogindex::HogConfig) {
        if let Some(v) = self.hog_cells_x {
            hog.cells_x = v;
        }
        if let Some(v) = self.hog_cells_y {
            hog.cells_y = v;
        }
        if let Some(v) = self.hog_bins {
            hog.orientation_bins = v;
        }
        if let Some(v) = self.hog_signed {
            hog.signed = v;
        }
        if let Some(v) = self.hog_working_size {
            hog.working_size = v;
        }
        if let Some(v) = self.hog_blur_sigma {
            hog.blur_sigma = v;
        }
    }
}

#[derive(Args)]
struct FlowFlags {
    /// Truncation of the descriptor data cost.
    #[arg(long)]
    flow_t: Option<f64>,
    /// Small-displacement penalty weight.
    #[arg(long)]
    flow_eta: Option<f64>,
    /// Smoothness weight between neighboring flow vectors.
    #[arg(long)]
    flow_alpha: Option<f64>,
    /// Smoothness truncation.
    #[arg(long)]
    flow_d: Option<f64>,
    #[arg(long)]
    flow_levels: Option<usize>,
    #[arg(long)]
    flow_coarse_window: Option<usize>,
    #[arg(long)]
    flow_refine_window: Option<usize>,
    #[arg(long)]
    flow_iterations: Option<usize>,
    #[arg(long)]
    flow_cell_size: Option<usize>,
}

impl FlowFlags {
    fn apply(&self, p: &mut FlowParams) {
        if let Some(v) = self.flow_t {
            p.t = v;
        }
        if let Some(v) = self.flow_eta {
            p.eta = v;
        }
        if let Some(v) = self.flow_alpha {
            p.alpha = v;
        }
        if let Some(v) = self.flow_d {
            p.d = v;
        }
        if let Some(v) = self.flow_levels {
            p.levels = v;
        }
        if let Some(v) = self.flow_coarse_window {
            p.coarse_window = v;
        }
        if let Some(v) = self.flow_refine_window {
            p.refine_window = v;
        }
        if let Some(v) = self.flow_iterations {
            p.iterations = v;
        }
        if let Some(v) = self.flow_cell_size {
            p.cell_size = v;
        }
    }
}

#[derive(Args)]
struct CrfFlags {
    #[arg(long)]
    crf_w_appearance: Option<f64>,
    #[arg(long)]
    crf_w_smoothness: Option<f64>,
    /// Appearance kernel spatial bandwidth in pixels.
    #[arg(long)]
    crf_theta_alpha: Option<f64>,
    /// Appearance kernel color bandwidth in 8-bit units.
    #[arg(long)]
    crf_theta_beta: Option<f64>,
    /// Smoothness kernel spatial bandwidth in pixels.
    #[arg(long)]
    crf_theta_gamma: Option<f64>,
    #[arg(long)]
    crf_iterations: Option<usize>,
    /// Label noise assumed by the unary term, in (0, 1).
    #[arg(long)]
    crf_epsilon: Option<f64>,
}

impl CrfFlags {
    fn apply(&self, p: &mut shapemat::densecrf::CrfParams) {
        if let Some(v) = self.crf_w_appearance {
            p.w_appearance = v;
        }
        if let Some(v) = self.crf_w_smoothness {
            p.w_smoothness = v;
        }
        if let Some(v) = self.crf_theta_alpha {
            p.theta_alpha = v;
        }
        if let Some(v) = self.crf_theta_beta {
            p.theta_beta = v;
        }
        if let Some(v) = self.crf_theta_gamma {
            p.theta_gamma = v;
        }
        if let Some(v) = self.crf_iterations {
            p.iterations = v;
        }
        if let Some(v) = self.crf_epsilon {
            p.epsilon = v;
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassifierKind {
    Uniform,
    ColorPrior,
    Fixture,
    Subprocess,
}

#[derive(Args)]
struct ClassifierFlags {
    /// Substance classifier backend.
    #[arg(long)]
    classifier: Option<ClassifierKind>,
    /// Directory of precomputed `<exemplar>.smap` files (fixture backend).
    #[arg(long)]
    classifier_dir: Option<PathBuf>,
    /// Executable invoked as `<command> <image.png> <out.smap>` (subprocess
    /// backend).
    #[arg(long)]
    classifier_command: Option<String>,
    /// Identifier recorded in provenance for the subprocess backend.
    #[arg(long)]
    classifier_id: Option<String>,
}

impl ClassifierFlags {
    fn build(&self) -> Result<Option<ClassifierChoice>> {
        let Some(kind) = self.classifier else {
            return Ok(None);
        };
        Ok(Some(match kind {
            ClassifierKind::Uniform => ClassifierChoice::Uniform,
            ClassifierKind::ColorPrior => ClassifierChoice::ColorPrior,
            ClassifierKind::Fixture => ClassifierChoice::Fixture {
                dir: self
                    .classifier_dir
                    .clone()
                    .context("--classifier fixture requires --classifier-dir")?,
            },
            ClassifierKind::Subprocess => {
                let command = self
                    .classifier_command
                    .clone()
                    .context("--classifier subprocess requires --classifier-command")?;
                let id = self.classifier_id.clone().unwrap_or_else(|| command.clone());
                ClassifierChoice::Subprocess { command, id }
            }
        }))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MatcherArg {
    Histogram,
    MedianColor,
}

impl From<MatcherArg> for MatcherChoice {
    fn from(m: MatcherArg) -> Self {
        match m {
            MatcherArg::Histogram => MatcherChoice::Histogram,
            MatcherArg::MedianColor => MatcherChoice::MedianColor,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CutoffDirectionArg {
    /// Keep matches with distance <= cutoff.
    DiscardAbove,
    /// Keep matches with distance >= cutoff.
    DiscardBelow,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Reference,
    Accelerated,
}

// ---------------------------------------------------------------------------
// helpers

fn write_json_pretty<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8();
    Ok(Mask::from_fn(
        img.width() as usize,
        img.height() as usize,
        |x, y| {
            let p = img.get_pixel(x as u32, y as u32).0;
            p.iter().copied().min().unwrap() >= 128
        },
    ))
}

fn load_labelmap_json(path: &Path) -> Result<LabelMap> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// ingest

#[derive(Args)]
struct IngestArgs {
    /// Directory of `.obj` / `.json` meshes to normalize.
    #[arg(long)]
    shapes: Option<PathBuf>,
    /// Output directory for normalized mesh JSON.
    #[arg(long)]
    out_shapes: Option<PathBuf>,
    /// Directory of exemplar photographs to standardize.
    #[arg(long)]
    exemplars: Option<PathBuf>,
    /// Output directory for standardized exemplars.
    #[arg(long)]
    out_exemplars: Option<PathBuf>,
    /// Square side of standardized exemplar crops.
    #[arg(long, default_value_t = shapemat::exemplar::DEFAULT_EXEMPLAR_SIZE)]
    exemplar_size: u32,
    #[arg(long, default_value_t = shapemat::exemplar::DEFAULT_WHITE_THRESHOLD)]
    white_threshold: u8,
    /// HOG distance below which two exemplars count as duplicates.
    #[arg(long, default_value_t = shapemat::exemplar::DEFAULT_DEDUP_THRESHOLD)]
    dedup_threshold: f64,
    /// Skip near-duplicate removal.
    #[arg(long)]
    no_dedup: bool,
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    if args.shapes.is_none() && args.exemplars.is_none() {
        bail!("nothing to ingest: pass --shapes and/or --exemplars");
    }
    if let Some(dir) = &args.shapes {
        let out = args
            .out_shapes
            .as_ref()
            .context("--shapes requires --out-shapes")?;
        fs::create_dir_all(out)?;
        let (shapes, failures) = load_shapes(dir)?;
        for s in &shapes {
            fs::write(
                out.join(format!("{}.json", s.shape_id)),
                shapemat::shapelib::mesh_to_json(&s.mesh)?,
            )?;
        }
        println!("shapes: {} normalized, {} failed", shapes.len(), failures.len());
        for f in &failures {
            println!("  failed {}: {}", f.id, f.reason);
        }
    }
    if let Some(dir) = &args.exemplars {
        let out = args
            .out_exemplars
            .as_ref()
            .context("--exemplars requires --out-exemplars")?;
        fs::create_dir_all(out)?;
        let masks_dir = out.join("masks");
        fs::create_dir_all(&masks_dir)?;
        let (loaded, failures) = load_exemplars(dir, args.exemplar_size, args.white_threshold)?;
        let (kept, removed) = if args.no_dedup {
            (loaded, Vec::new())
        } else {
            exemplar::dedup(loaded, args.dedup_threshold)?
        };
        for e in &kept {
            e.image.save(out.join(format!("{}.png", e.id)))?;
            write_mask_png(&e.mask, &masks_dir.join(format!("{}.png", e.id)))?;
        }
        write_json_pretty(
            &out.join("manifest.json"),
            &exemplar::manifest(&kept, &removed),
        )?;
        println!(
            "exemplars: {} kept, {} removed as duplicates, {} failed",
            kept.len(),
            removed.len(),
            failures.len()
        );
        for f in &failures {
            println!("  failed {}: {}", f.id, f.reason);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// grid

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    grid: GridFlags,
    /// Output path for the grid JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_grid(args: GridArgs) -> Result<()> {
    let mut config = GridConfig::default();
    args.grid.apply(&mut config)?;
    let grid = build_viewpoint_grid(&config)?;
    eprintln!("{} poses", grid.poses.len());
    match &args.out {
        Some(path) => write_json_pretty(path, &grid)?,
        None => print_json(&grid)?,
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// index

#[derive(Subcommand)]
enum IndexCmd {
    /// Render shapes over the grid and index exemplars against them.
    Build(IndexBuildArgs),
    /// Print one exemplar's nearest renderings.
    Query(IndexQueryArgs),
    /// Write the per-shape inverted index as JSON.
    Invert(IndexInvertArgs),
    /// Dump the whole index as JSON.
    Dump(IndexDumpArgs),
}

#[derive(Args)]
struct IndexBuildArgs {
    #[arg(long)]
    shapes: PathBuf,
    #[arg(long)]
    exemplars: PathBuf,
    /// Output path for the binary index.
    #[arg(long)]
    out: PathBuf,
    /// Nearest renderings kept per exemplar.
    #[arg(long, default_value_t = 12)]
    k: usize,
    #[arg(long, default_value_t = 128)]
    render_resolution: u32,
    /// Square side of standardized exemplar crops.
    #[arg(long, default_value_t = 256)]
    exemplar_size: u32,
    #[arg(long, default_value_t = shapemat::exemplar::DEFAULT_WHITE_THRESHOLD)]
    white_threshold: u8,
    #[command(flatten)]
    grid: GridFlags,
    #[command(flatten)]
    hog: HogFlags,
}

fn cmd_index_build(args: IndexBuildArgs) -> Result<()> {
    let mut grid_config = GridConfig::default();
    args.grid.apply(&mut grid_config)?;
    let mut hog_config = shapemat::hogindex::HogConfig::default();
    args.hog.apply(&mut hog_config);

    let (shapes, shape_failures) = load_shapes(&args.shapes)?;
    let (exemplars, exemplar_failures) =
        load_exemplars(&args.exemplars, args.exemplar_size, args.white_threshold)?;
    let grid = build_viewpoint_grid(&grid_config)?;
    let entries = build_rendering_entries(&shapes, &grid, args.render_resolution, &hog_config)?;
    let descriptors = exemplar_descriptors(&exemplars, &hog_config)?;
    let index = build_reverse_index(&descriptors, &entries, args.k)?;
    save_index(&index, &args.out)?;
    println!(
        "indexed {} renderings of {} shapes against {} exemplars -> {}",
        entries.len(),
        shapes.len(),
        exemplars.len(),
        args.out.display()
    );
    for f in shape_failures.iter().chain(&exemplar_failures) {
        println!("  failed {}: {}", f.id, f.reason);
    }
    Ok(())
}

#[derive(Args)]
struct IndexQueryArgs {
    #[arg(long)]
    index: PathBuf,
    /// Exemplar id to look up.
    #[arg(long)]
    exemplar_id: String,
}

fn cmd_index_query(args: IndexQueryArgs) -> Result<()> {
    let index = load_index(&args.index)?;
    let hits = index
        .entries
        .iter()
        .find(|(id, _)| *id == args.exemplar_id)
        .map(|(_, hits)| hits)
        .with_context(|| format!("exemplar '{}' not in the index", args.exemplar_id))?;
    print_json(hits)
}

#[derive(Args)]
struct IndexInvertArgs {
    #[arg(long)]
    index: PathBuf,
    /// Output path for the inverted JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_index_invert(args: IndexInvertArgs) -> Result<()> {
    let index = load_index(&args.index)?;
    let inverted = invert_index(&index);
    match &args.out {
        Some(path) => write_json_pretty(path, &inverted)?,
        None => print_json(&inverted)?,
    }
    Ok(())
}

#[derive(Args)]
struct IndexDumpArgs {
    #[arg(long)]
    index: PathBuf,
    /// Output path for the JSON dump; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_index_dump(args: IndexDumpArgs) -> Result<()> {
    let index = load_index(&args.index)?;
    match &args.out {
        Some(path) => write_json_pretty(path, &index)?,
        None => print_json(&index)?,
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// align

#[derive(Clone, Copy, ValueEnum)]
enum FlowDirection {
    /// Flow from the rendered silhouette onto the exemplar (default).
    RenderToExemplar,
    /// Flow from the exemplar onto the rendered silhouette.
    ExemplarToRender,
}

#[derive(Args)]
struct AlignArgs {
    /// Rendered silhouette mask PNG (white foreground).
    #[arg(long)]
    render_mask: PathBuf,
    /// Exemplar silhouette mask PNG (white foreground).
    #[arg(long)]
    exemplar_mask: PathBuf,
    #[arg(long, value_enum, default_value_t = FlowDirection::RenderToExemplar)]
    direction: FlowDirection,
    /// Label map JSON to warp through the flow.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output path for the flow field (.flo).
    #[arg(long)]
    flow_out: Option<PathBuf>,
    /// Output path for the warped label map JSON.
    #[arg(long)]
    warped_out: Option<PathBuf>,
    #[command(flatten)]
    flow: FlowFlags,
}

fn cmd_align(args: AlignArgs) -> Result<()> {
    let mut params = FlowParams::default();
    args.flow.apply(&mut params);
    let render = load_mask_png(&args.render_mask)?;
    let exemplar = load_mask_png(&args.exemplar_mask)?;
    let (src_mask, dst_mask) = match args.direction {
        FlowDirection::RenderToExemplar => (&render, &exemplar),
        FlowDirection::ExemplarToRender => (&exemplar, &render),
    };
    let src = encode_coordinate_silhouette(src_mask)?;
    let dst = encode_coordinate_silhouette(dst_mask)?;
    let flow = compute_flow(&src, &dst, &params)?;
    let (mx, my) = median_flow(&flow, src_mask);
    println!("median flow: ({mx}, {my})");
    if let Some(path) = &args.flow_out {
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        write_flo(&flow, &mut file)?;
        println!("flow -> {}", path.display());
    }
    if let Some(path) = &args.labels {
        let labels = load_labelmap_json(path)?;
        let warped = warp_labels(&labels, &flow)?;
        let out = args
            .warped_out
            .as_ref()
            .context("--labels requires --warped-out")?;
        write_json_pretty(out, &warped)?;
        println!("warped labels -> {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// assign

#[derive(Args)]
struct AssignArgs {
    /// Standardized exemplar image PNG.
    #[arg(long)]
    exemplar: PathBuf,
    /// Refined part label map JSON matching the exemplar dimensions.
    #[arg(long)]
    parts: PathBuf,
    #[arg(long)]
    library: PathBuf,
    /// Output path for the per-part assignment JSON.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated part names aligned with part ids.
    #[arg(long, value_delimiter = ',')]
    part_names: Vec<String>,
    #[arg(long, default_value_t = shapemat::exemplar::DEFAULT_WHITE_THRESHOLD)]
    white_threshold: u8,
    #[arg(long, value_enum, default_value_t = MatcherArg::Histogram)]
    matcher: MatcherArg,
    #[arg(long, default_value_t = 12)]
    max_alternatives: usize,
    #[command(flatten)]
    classifier: ClassifierFlags,
}

fn cmd_assign(args: AssignArgs) -> Result<()> {
    let image = image::open(&args.exemplar)
        .with_context(|| format!("reading {}", args.exemplar.display()))?
        .to_rgb8();
    let mask = exemplar::foreground_mask(&image, args.white_threshold)?;
    let refined = load_labelmap_json(&args.parts)?;
    let lib = load_material_library(&args.library)?;
    let choice = args
        .classifier
        .build()?
        .unwrap_or(ClassifierChoice::ColorPrior);
    let classifier = make_classifier(&choice);
    let exemplar_id = args
        .exemplar
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let map = classifier
        .classify(&exemplar_id, &image, &mask)
        .map_err(shapemat::pipeline::PipelineError::from)?;
    let labeling = aggregate_part_substance(&refined, &map)
        .map_err(shapemat::pipeline::PipelineError::from)?;
    let names: Vec<String> = if args.part_names.is_empty() {
        (0..refined.label_count).map(|i| format!("part-{i}")).collect()
    } else {
        args.part_names.clone()
    };
    let parts = assign_parts(
        &refined,
        &labeling,
        &names,
        &image,
        &lib,
        args.matcher.into(),
        args.max_alternatives,
    )?;
    write_json_pretty(&args.out, &parts)?;
    println!("{} parts -> {}", parts.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of descriptor JSON files.
    #[arg(long)]
    descriptors: PathBuf,
    /// Ground-truth manifest JSON.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    library: PathBuf,
    /// Output path for the evaluation report JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let descriptors = load_descriptors(&args.descriptors)?;
    let truth = load_truth_manifest(&args.truth)?;
    let lib = load_material_library(&args.library)?;
    let report = evaluate(&descriptors, &truth, &lib)?;
    if let Some(m) = &report.metrics {
        println!(
            "mtl@1 {:.4}  mtl@5 {:.4}  sub-mtl@1 {:.4}  parts {}",
            m.mtl_at_1, m.mtl_at_5, m.sub_mtl_at_1, report.parts_scored
        );
    } else {
        println!("no parts scored");
    }
    match &args.out {
        Some(path) => write_json_pretty(path, &report)?,
        None => print_json(&report)?,
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// run

#[derive(Args)]
struct RunArgs {
    /// Directory of input meshes (.obj or hand-off .json).
    #[arg(long)]
    shapes: PathBuf,
    /// Directory of exemplar photographs (PNG/JPEG).
    #[arg(long)]
    exemplars: PathBuf,
    /// Material library manifest (JSON array).
    #[arg(long)]
    library: PathBuf,
    /// Run directory for all outputs.
    #[arg(long)]
    out: PathBuf,
    /// Base configuration JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Resolution of the retrieval renders.
    #[arg(long)]
    render_resolution: Option<u32>,
    /// Resolution the part map is rendered at before alignment.
    #[arg(long)]
    align_source_resolution: Option<u32>,
    /// Square size silhouettes are aligned at.
    #[arg(long)]
    align_size: Option<u32>,
    /// Resolution of preview renders.
    #[arg(long)]
    preview_resolution: Option<u32>,
    /// Candidates kept per shape before the distance cutoff.
    #[arg(long)]
    top_n: Option<usize>,
    /// Retrieval distance cutoff.
    #[arg(long)]
    distance_cutoff: Option<f64>,
    /// Which side of the cutoff is discarded.
    #[arg(long, value_enum)]
    cutoff_direction: Option<CutoffDirectionArg>,
    /// Material signature matcher.
    #[arg(long, value_enum)]
    matcher: Option<MatcherArg>,
    /// Ranked alternatives stored per part.
    #[arg(long)]
    max_alternatives: Option<usize>,
    /// Min channel value treated as background white in exemplars.
    #[arg(long)]
    white_threshold: Option<u8>,
    /// CRF solver backend.
    #[arg(long, value_enum)]
    crf_backend: Option<BackendArg>,
    #[command(flatten)]
    grid: GridFlags,
    #[command(flatten)]
    hog: HogFlags,
    #[command(flatten)]
    flow: FlowFlags,
    #[command(flatten)]
    crf: CrfFlags,
    #[command(flatten)]
    classifier: ClassifierFlags,
}

fn build_run_config(args: &RunArgs) -> Result<PipelineConfig> {
    let mut config = match &args.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.render_resolution {
        config.render_resolution = v;
    }
    if let Some(v) = args.align_source_resolution {
        config.align_source_resolution = v;
    }
    if let Some(v) = args.align_size {
        config.align_size = v;
    }
    if let Some(v) = args.preview_resolution {
        config.preview_resolution = v;
    }
    if let Some(v) = args.top_n {
        config.top_n = v;
    }
    if let Some(v) = args.distance_cutoff {
        config.distance_cutoff = v;
    }
    if let Some(v) = args.cutoff_direction {
        config.cutoff_direction = match v {
            CutoffDirectionArg::DiscardAbove => CutoffDirection::DiscardAbove,
            CutoffDirectionArg::DiscardBelow => CutoffDirection::DiscardBelow,
        };
    }
    if let Some(v) = args.matcher {
        config.matcher = v.into();
    }
    if let Some(v) = args.max_alternatives {
        config.max_alternatives = v;
    }
    if let Some(v) = args.white_threshold {
        config.white_threshold = v;
    }
    if let Some(v) = args.crf_backend {
        config.crf_backend = match v {
            BackendArg::Reference => CrfBackend::Reference,
            BackendArg::Accelerated => CrfBackend::Accelerated,
        };
    }
    args.grid.apply(&mut config.grid)?;
    args.hog.apply(&mut config.hog);
    args.flow.apply(&mut config.flow);
    args.crf.apply(&mut config.crf);
    if let Some(choice) = args.classifier.build()? {
        config.classifier = choice;
    }
    Ok(config)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = build_run_config(&args)?;
    let report = run_pipeline(
        &args.shapes,
        &args.exemplars,
        &args.library,
        &args.out,
        &config,
    )?;
    println!("config hash {}", report.config_hash);
    println!(
        "shapes {} ({} failed), exemplars {} ({} failed), renderings {}",
        report.shapes,
        report.shape_failures.len(),
        report.exemplars,
        report.exemplar_failures.len(),
        report.renderings
    );
    println!(
        "candidates selected {} refined {} assigned {}; {} descriptors, {} candidate failures, {} shapes without candidates",
        report.funnel.selected,
        report.funnel.refined,
        report.funnel.assigned,
        report.descriptors_written,
        report.candidate_failures.len(),
        report.zero_candidate_shapes.len()
    );
    println!("report -> {}", args.out.join("report.json").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// synthgen

#[derive(Subcommand)]
enum SynthgenCmd {
    /// Sample randomized render configurations for one shape.
    Sample(SynthgenSampleArgs),
}

#[derive(Args)]
struct SynthgenSampleArgs {
    /// Mesh file (.obj or .json) to sample configurations for.
    #[arg(long)]
    shape: PathBuf,
    #[arg(long)]
    library: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives configs.json and optional scene files.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated substance per part, aligned with part ids; cycles
    /// through all substances when omitted.
    #[arg(long, value_delimiter = ',')]
    part_substances: Vec<String>,
    /// Comma-separated environment map ids.
    #[arg(long, value_delimiter = ',', default_value = "studio")]
    env_maps: Vec<String>,
    /// Also emit scene JSON and ground-truth label maps per sample.
    #[arg(long)]
    emit_scenes: bool,
    /// Ground-truth render resolution when emitting scenes.
    #[arg(long, default_value_t = 256)]
    resolution: u32,
    #[command(flatten)]
    grid: GridFlags,
}

fn cmd_synthgen_sample(args: SynthgenSampleArgs) -> Result<()> {
    let text = fs::read_to_string(&args.shape)
        .with_context(|| format!("reading {}", args.shape.display()))?;
    let raw = if args.shape.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj")) {
        shapemat::shapelib::load_obj(&text)?
    } else {
        shapemat::shapelib::mesh_from_json(&text)?
    };
    let mesh = pipeline::prepare_mesh(&raw)?;
    let shape_id = args
        .shape
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let lib = load_material_library(&args.library)?;

    let part_substances: Vec<(String, usize)> = mesh
        .material_part_names
        .iter()
        .enumerate()
        .map(|(i, name)| -> Result<(String, usize)> {
            let substance = if args.part_substances.is_empty() {
                SUBSTANCES[i % SUBSTANCES.len()].to_string()
            } else {
                args.part_substances
                    .get(i)
                    .with_context(|| format!("no substance given for part {i} ({name})"))?
                    .clone()
            };
            let idx = substance_index(&substance)
                .with_context(|| format!("unknown substance '{substance}'"))?;
            Ok((name.clone(), idx))
        })
        .collect::<Result<_>>()?;

    let mut grid_config = GridConfig::default();
    args.grid.apply(&mut grid_config)?;
    let grid = build_viewpoint_grid(&grid_config)?;
    let pair = SamplePair {
        shape_id: &shape_id,
        exemplar_id: None,
        pose_prior: &grid.poses,
        env_maps: &args.env_maps,
    };
    let configs = sample_batch(&pair, &part_substances, &lib, args.count, args.seed)?;
    fs::create_dir_all(&args.out)?;
    write_json_pretty(&args.out.join("configs.json"), &configs)?;
    println!(
        "{} configs for '{}' -> {}",
        configs.len(),
        shape_id,
        args.out.join("configs.json").display()
    );

    if args.emit_scenes {
        for (i, config) in configs.iter().enumerate() {
            let emission = emit_scene(config, &mesh, &lib, args.resolution)?;
            let stem = format!("{shape_id}-{i:05}");
            fs::write(args.out.join(format!("{stem}.scene.json")), &emission.scene_bytes)?;
            shapemat::raster::write_labelmap_png16(
                &emission.material_map,
                &args.out.join(format!("{stem}.materials.png")),
            )?;
            shapemat::raster::write_labelmap_png16(
                &emission.substance_map,
                &args.out.join(format!("{stem}.substances.png")),
            )?;
        }
        println!("{} scenes emitted", configs.len());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// loss

#[derive(Subcommand)]
enum LossCmd {
    /// Validate analytic gradients and loss identities numerically.
    Check(LossCheckArgs),
}

#[derive(Args)]
struct LossCheckArgs {
    /// Run the finite-difference gradient suite.
    #[arg(long)]
    fd: bool,
    #[arg(long, default_value_t = 1000)]
    states: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum tolerated relative error.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn cmd_loss_check(args: LossCheckArgs) -> Result<()> {
    if !args.fd {
        bail!("nothing to check: pass --fd");
    }
    let mut worst: f64 = 0.0;
    let mut worst_seed = args.seed;
    for i in 0..args.states {
        let seed = args.seed.wrapping_add(i as u64);
        let state = random_loss_state(seed);
        let (loss, _) = multitask_loss_uncertainty(&state)?;
        anyhow::ensure!(loss.is_finite(), "non-finite loss at seed {seed}");
        let err = finite_difference_error(&state)?;
        if err > worst {
            worst = err;
            worst_seed = seed;
        }
    }
    println!(
        "finite-difference max relative error {worst:.3e} over {} states (worst seed {worst_seed})",
        args.states
    );
    if worst > args.tolerance {
        bail!("gradient error {worst:.3e} exceeds tolerance {:.3e}", args.tolerance);
    }
    Ok(())
}
