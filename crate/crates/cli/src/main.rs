use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use heisenbridge::config::RunConfig;
use heisenbridge::distance::{sr_distance_sq_with, DistanceConvention, DistanceQuery};
use heisenbridge::grid::write_field_bundle;
use heisenbridge::group::{FrameKind, GroupPoint};
use heisenbridge::kernel::{kernel_origin, KernelEvaluator};
use heisenbridge::pipeline::{
    epsilon_dir, oracle_comparison, read_potentials, varadhan_table, write_bridge, write_potentials, write_text,
    ConvergenceTrace, Problem, RunReport, SimulationMetrics,
};
use heisenbridge::report::to_canonical_json;
use heisenbridge::sde::{
    histogram, pathwise_cost, sample_density, simulate, terminal_marginal_error, write_paths_csv, Initial,
};
use heisenbridge::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "heisenbridge", version, about = "Schrödinger bridges on Heisenberg-type groups")]
struct Cli {
    /// JSON run configuration. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 = all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate the heat kernel at a point, or tabulate it to a bundle.
    Kernel(KernelArgs),
    /// Run the ε schedule, reconstruct every bridge, write bundles and the report.
    Solve,
    /// Simulate the SDE, controlled by a solved bridge or uncontrolled.
    Simulate(SimulateArgs),
    /// Varadhan table and discrete-OT comparison for a solved run.
    Diagnose,
    /// Print the squared sub-Riemannian distance between two points.
    Distance(DistanceArgs),
}

#[derive(Args, Debug)]
struct KernelArgs {
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    /// Offset from the identity as `x,y,z`; omit to tabulate.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    point: Option<GroupPoint>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Ignore the bridge and run the free diffusion.
    #[arg(long)]
    uncontrolled: bool,
    /// Frame for uncontrolled runs.
    #[arg(long, value_parser = parse_frame)]
    frame: Option<FrameKind>,
    /// Start every particle at this point instead of sampling the initial density.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    from: Option<GroupPoint>,
    #[arg(long)]
    particles: Option<usize>,
    /// ε of the bridge to follow (overrides `sim.epsilon`).
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args, Debug)]
struct DistanceArgs {
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    from: GroupPoint,
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    to: GroupPoint,
}

fn parse_point(s: &str) -> std::result::Result<GroupPoint, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|c| c.trim().parse::<f64>().map_err(|e| format!("{c:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] => Ok(GroupPoint::new(*x, *y, *z)),
        _ => Err("expected x,y,z".into()),
    }
}

fn parse_frame(s: &str) -> std::result::Result<FrameKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| {
        format!("unknown frame {s:?} (heisenberg, planar_constant, isotropic)")
    })
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 1,
        Error::QuadratureNonConvergence { .. } | Error::NonPositiveKernel { .. } => 2,
        Error::NonConvergence { .. } | Error::DivisionUnderflow { .. } | Error::EndpointMismatch { .. } => 3,
        Error::MissingArtifact(_) => 4,
        _ => 5,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.output_dir = o.display().to_string();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = PathBuf::from(&cfg.output_dir);
    match &cli.command {
        Command::Kernel(a) => cmd_kernel(&cfg, &out, a),
        Command::Solve => cmd_solve(cfg, &out),
        Command::Simulate(a) => cmd_simulate(cfg, &out, a),
        Command::Diagnose => cmd_diagnose(cfg, &out),
        Command::Distance(a) => cmd_distance(&cfg, a),
    }
}

fn snapshot(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_text(&out.join("config.resolved.json"), &cfg.resolved_json()?)
}

fn cmd_kernel(cfg: &RunConfig, out: &Path, a: &KernelArgs) -> Result<()> {
    if let Some(q) = a.point {
        let p = if cfg.table.formula == heisenbridge::kernel::KernelFormula::Exact {
            kernel_origin(q, a.t, a.epsilon, cfg.alpha, &cfg.quadrature)?
        } else {
            KernelEvaluator::with_formula(a.t, a.epsilon, cfg.alpha, cfg.quadrature, cfg.table.formula)?.density(q)?
        };
        println!("{}", heisenbridge::report::format_f64(p));
        return Ok(());
    }
    let grid = cfg.grid.build()?;
    let table = cfg.table_settings(&grid).tabulate(a.t, a.epsilon)?;
    let dir = out.join(format!("kernel_t{}_eps{}", a.t, a.epsilon));
    table.write_bundle(&dir)?;
    snapshot(cfg, out)?;
    println!("{} renorm {}", dir.display(), heisenbridge::report::format_f64(table.renorm));
    Ok(())
}

fn cmd_solve(cfg: RunConfig, out: &Path) -> Result<()> {
    snapshot(&cfg, out)?;
    let t_f = cfg.t_f;
    let problem = Problem::new(cfg)?;
    let outcome = problem.solve()?;
    let mut report = RunReport::default();
    for p in &outcome.potentials {
        report.convergence.push(ConvergenceTrace::from_potentials(p));
        write_potentials(&epsilon_dir(out, p.epsilon), p, t_f)?;
    }
    let mut failure = outcome.failure;
    if failure.is_none() {
        for p in &outcome.potentials {
            match problem.reconstruct(p) {
                Ok(b) => {
                    write_bridge(&epsilon_dir(out, p.epsilon).join("bridge"), &b)?;
                    report.bridges.push(b.summary());
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
    }
    report.record_tables(&problem.cache);
    if let Some(e) = &failure {
        report.warnings.push(format!("run stopped early, partial artifacts kept: {e}"));
        log::warn!("run stopped early, partial artifacts kept: {e}");
    }
    report.write(&out.join("report.json"))?;
    for b in &report.bridges {
        println!(
            "eps {} cost {:.6} eps*kl {:.6} endpoint L1 {:.2e} {:.2e}",
            b.epsilon, b.cost, b.eps_kl_static, b.endpoint_l1[0], b.endpoint_l1[1]
        );
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn cmd_simulate(mut cfg: RunConfig, out: &Path, a: &SimulateArgs) -> Result<()> {
    if let Some(f) = a.frame {
        cfg.sim.frame = f;
    }
    if let Some(n) = a.particles {
        cfg.sim.n_particles = n;
    }
    if let Some(e) = a.epsilon {
        cfg.sim.epsilon = e;
    }
    if a.uncontrolled {
        cfg.sim.controlled = false;
    }
    if cfg.sim.controlled && cfg.sim.frame != FrameKind::Heisenberg {
        return Err(Error::Config("controlled runs need the heisenberg frame".into()));
    }
    cfg.validate()?;
    let sim_dir = out.join(if cfg.sim.controlled { format!("sim_eps_{}", cfg.sim.epsilon) } else { "sim_free".into() });
    let eps = cfg.sim.epsilon;
    let sim = cfg.sim_config(&cfg.grid.build()?)?;
    let problem = Problem::new(cfg)?;
    let bridge = if problem.config.sim.controlled {
        let p = read_potentials(&epsilon_dir(out, eps), eps)?;
        Some(problem.reconstruct(&p)?)
    } else {
        None
    };
    let initial = match a.from {
        Some(q) => Initial::Point(q),
        None => Initial::Density(&problem.rho_0),
    };
    let ens = simulate(&sim, initial, bridge.as_ref())?;
    write_paths_csv(&ens, &sim_dir.join("paths.csv"))?;
    let hist = histogram(&ens.terminal, &problem.grid);
    write_field_bundle(&sim_dir.join("terminal_histogram"), "terminal_histogram", sim.t_f, &hist)?;
    let terminal_error = terminal_marginal_error(&ens, &problem.rho_f);
    let reference = sample_density(&problem.rho_f, sim.n_particles, sim.seed ^ 0x5eed)?;
    let noise_floor = histogram(&reference, &problem.grid).l1_distance(&problem.rho_f);
    let (cost, stderr) = pathwise_cost(&ens);
    let metrics = SimulationMetrics {
        epsilon: eps,
        controlled: bridge.is_some(),
        n_particles: sim.n_particles,
        seed: sim.seed,
        terminal_error,
        noise_floor,
        pathwise_cost: cost,
        pathwise_stderr: stderr,
        transport_cost: bridge.as_ref().map(|b| b.cost),
        escaped: ens.escaped,
    };
    write_text(&sim_dir.join("metrics.json"), &to_canonical_json(&metrics)?)?;
    snapshot(&problem.config, out)?;
    println!(
        "terminal L1 {terminal_error:.4} (noise floor {noise_floor:.4}) pathwise cost {cost:.5} ± {stderr:.5}"
    );
    Ok(())
}

fn cmd_diagnose(cfg: RunConfig, out: &Path) -> Result<()> {
    let report_path = out.join("report.json");
    let mut report = RunReport::read(&report_path)?;
    if report.bridges.is_empty() {
        return Err(Error::MissingArtifact(out.join("eps_*/bridge")));
    }
    let d = &cfg.diagnose;
    report.varadhan = varadhan_table(&cfg.varadhan_probes(), d.varadhan_t, &d.varadhan_epsilons, cfg.alpha, &cfg.quadrature)?;
    let problem = Problem::new(cfg)?;
    let oracle = oracle_comparison(&problem, &report.bridges)?;
    println!("oracle cost {:.6} (n = {})", oracle.oracle_cost, oracle.n_support);
    for (eps, cost, gap) in &oracle.bridge_costs {
        println!("eps {eps} cost {cost:.6} gap {:+.2}%", 100.0 * gap);
    }
    for row in &report.varadhan {
        println!("varadhan eps {} max rel error {:.4}", row.epsilon, row.max_rel_error);
    }
    report.oracle = Some(oracle);
    report.write(&report_path)
}

fn cmd_distance(cfg: &RunConfig, a: &DistanceArgs) -> Result<()> {
    let q = DistanceQuery { q1: a.from, q2: a.to, alpha: cfg.alpha };
    let k = sr_distance_sq_with(&q, DistanceConvention::Kernel);
    let p = sr_distance_sq_with(&q, DistanceConvention::Printed);
    println!("{}", heisenbridge::report::format_f64(k));
    if (k - p).abs() > 1e-12 * k.max(1.0) {
        eprintln!("note: the explicit-formula vertical constant gives {}", heisenbridge::report::format_f64(p));
    }
    Ok(())
}
