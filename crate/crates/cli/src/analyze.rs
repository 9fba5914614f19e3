use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use volseg::archspec::{
    count_parameters, estimate_activation_memory, receptive_field, ArchKind, ArchitectureGraph,
};
use volseg::volume::Dims;

use crate::{model_graph, out_dir, parse_dims, write_file, AnyResult};

pub const HELP: &str = "\
Receptive fields, parameter counts and memory of an architecture.

Without --arch or --graph all three built-in architectures are reported.
Prints an aligned text report and writes into --out-dir:
  analyze.txt          the text report
  analyze_summary.csv  arch,single_resolution,parameters,output_rf,activation_bytes
  analyze_taps.csv     arch,tap,node,rf
  analyze_nodes.csv    arch,node,kind,level,channels,rf,jump";

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    arch: Option<ArchKind>,
    /// Analyze the single-resolution variant instead.
    #[arg(long)]
    single_res: bool,
    /// Architecture document (JSON) to analyze instead of a built-in one.
    #[arg(long, conflicts_with = "arch")]
    graph: Option<PathBuf>,
    /// Writes the analyzed graph document(s) as `<name>.json`.
    #[arg(long)]
    dump_graph: bool,
    #[arg(long, default_value_t = 8)]
    filter_base: usize,
    /// Input extent for the memory estimate.
    #[arg(long, default_value = "64", value_parser = parse_dims)]
    input_size: Dims,
    /// Bytes per stored activation value.
    #[arg(long, default_value_t = 4)]
    bytes: u64,
    #[arg(long, env = "VOLSEG_OUT", default_value = "volseg_out")]
    out_dir: PathBuf,
}

pub fn run(a: AnalyzeArgs) -> AnyResult<()> {
    let graphs: Vec<ArchitectureGraph> = match (&a.graph, a.arch) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            vec![ArchitectureGraph::from_json(&text)?]
        }
        (None, Some(k)) => vec![model_graph(k, a.single_res, a.filter_base)?],
        (None, None) => ArchKind::ALL
            .iter()
            .map(|&k| model_graph(k, a.single_res, a.filter_base))
            .collect::<AnyResult<_>>()?,
    };
    let mut text = String::new();
    let mut summary = String::from("arch,single_resolution,parameters,output_rf,activation_bytes\n");
    let mut taps = String::from("arch,tap,node,rf\n");
    let mut nodes = String::from("arch,node,kind,level,channels,rf,jump\n");
    let dir = out_dir(&a.out_dir)?;
    for g in &graphs {
        let trace = receptive_field(g)?;
        let params = count_parameters(g, volseg::IN_CHANNELS, volseg::NUM_CLASSES)?;
        let memory = estimate_activation_memory(g, a.input_size, a.bytes)?;
        let kind = if g.single_resolution { "single-resolution" } else { "multi-resolution" };
        let s = a.input_size;
        let _ = writeln!(text, "{} ({kind})", g.name);
        let _ = writeln!(text, "  parameters   {params}");
        let _ = writeln!(text, "  output rf    {}  (jump {})", trace.output_rf, trace.output_jump);
        let _ = writeln!(
            text,
            "  activations  {memory} bytes for a {}x{}x{} input at {} bytes/value",
            s[0], s[1], s[2], a.bytes
        );
        if !trace.taps.is_empty() {
            let _ = writeln!(text, "  taps");
            for (label, node, rf) in &trace.taps {
                let _ = writeln!(text, "    {label:<14}{node:<16}rf {rf}");
                let _ = writeln!(taps, "{},{label},{node},{rf}", g.name);
            }
        }
        let _ = writeln!(text, "  nodes");
        let _ = writeln!(
            text,
            "    {:<16}{:<11}{:>6}{:>9}{:>6}{:>6}",
            "name", "kind", "level", "channels", "rf", "jump"
        );
        for n in &trace.nodes {
            let _ = writeln!(
                text,
                "    {:<16}{:<11}{:>6}{:>9}{:>6}{:>6}",
                n.name,
                n.kind.as_str(),
                n.level,
                n.channels,
                n.rf,
                n.jump
            );
            let _ = writeln!(
                nodes,
                "{},{},{},{},{},{},{}",
                g.name,
                n.name,
                n.kind.as_str(),
                n.level,
                n.channels,
                n.rf,
                n.jump
            );
        }
        let _ = writeln!(text);
        let _ = writeln!(
            summary,
            "{},{},{params},{},{memory}",
            g.name, g.single_resolution, trace.output_rf
        );
        if a.dump_graph {
            write_file(&dir.join(format!("{}.json", g.name)), &(g.to_json() + "\n"))?;
        }
    }
    write_file(&dir.join("analyze.txt"), &text)?;
    write_file(&dir.join("analyze_summary.csv"), &summary)?;
    write_file(&dir.join("analyze_taps.csv"), &taps)?;
    write_file(&dir.join("analyze_nodes.csv"), &nodes)?;
    print!("{text}");
    Ok(())
}
