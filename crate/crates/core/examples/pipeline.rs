//! gen -> label -> train -> eval through the command layer, each step
//! leaving a replayable run manifest.

use evocomp::commands::{execute, Command, EvalCommand, GenCommand, LabelCommand, TrainCommand};
use evocomp::compressor::CompressorConfig;
use evocomp::synth::GenConfig;

fn main() -> evocomp::Result<()> {
    let dir = tempfile::tempdir()?;
    let at = |name: &str| dir.path().join(name);
    let data = at("data");
    let gen = GenConfig { n_samples: 128, dim: 32, ..Default::default() };
    let steps = [
        Command::Gen(GenCommand { gen, planted_seed: None, out: data.clone() }),
        Command::Label(LabelCommand {
            dataset: data.join("samples.evc"),
            anchors: data.join("anchors.evc"),
            out: at("labels.jsonl"),
            workers: 4,
            ..Default::default()
        }),
        Command::Train(TrainCommand {
            dataset: data.join("samples.evc"),
            labels: at("labels.jsonl"),
            out: at("compressor.evp"),
            history: None,
            compressor: CompressorConfig { d_model: 32, epochs: 10, ..Default::default() },
        }),
        Command::Eval(EvalCommand {
            dataset: data.join("samples.evc"),
            labels: at("labels.jsonl"),
            params: at("compressor.evp"),
            planted: Some(data.join("planted.jsonl")),
            ..Default::default()
        }),
    ];
    for cmd in &steps {
        let manifest = at(&format!("{}.manifest.json", cmd.name()));
        let (run, outcome) = execute(cmd, Some(&manifest))?;
        print!("[{}] {:.2}s\n{}", run.command, run.wall_clock_seconds, outcome.display);
    }
    Ok(())
}
