//! Prints macro Dice of every pipeline variant on synthetic cohorts.
//!
//! cargo run --release --example ablation -- [n_seeds] [spec.json]

use std::time::Instant;

use proto_refine::metrics::{aggregate_reports, confusion_matrix, Aggregation};
use proto_refine::pipeline::{run_pipeline, Toggles};
use proto_refine::synth::{generate_cohort, SynthSpec};
use proto_refine::RefineConfig;

fn main() -> proto_refine::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_seeds: u64 = args.next().map_or(5, |s| s.parse().expect("n_seeds"));
    let base: SynthSpec = match args.next() {
        Some(p) => {
            serde_json::from_str(&std::fs::read_to_string(p).expect("spec")).expect("spec json")
        }
        None => SynthSpec::default(),
    };
    let variants = [
        Toggles::COARSE_ONLY,
        Toggles::LOCAL,
        Toggles::LOCAL_GLOBAL,
        Toggles::LOCAL_GLOBAL_DDS,
        Toggles::FULL,
    ];
    print!("{:>5} {:>8}", "seed", "coarse");
    for v in &variants {
        print!(" {:>16}", v.label());
    }
    println!();
    for seed in 0..n_seeds {
        let spec = SynthSpec {
            seed,
            ..base.clone()
        };
        let cohort = generate_cohort(&spec, 8)?;
        let slides: Vec<_> = cohort.iter().map(|s| s.slide.clone()).collect();
        let truths: Vec<_> = cohort.iter().map(|s| s.truth.clone()).collect();
        let coarse = cohort
            .iter()
            .map(|s| {
                Ok((
                    s.slide.slide_id().to_string(),
                    confusion_matrix(&s.slide.coarse_labels(), &s.truth)?,
                ))
            })
            .collect::<proto_refine::Result<Vec<_>>>()?;
        let coarse = aggregate_reports(&coarse, Aggregation::Macro)?;
        print!("{seed:>5} {:>8.4}", coarse.values.dice.unwrap_or(f64::NAN));
        let cfg = RefineConfig {
            seed,
            ..RefineConfig::default()
        };
        for v in &variants {
            let t = Instant::now();
            let out = run_pipeline(&slides, Some(&truths), &cfg, *v)?;
            let dice = out.report.and_then(|r| r.values.dice).unwrap_or(f64::NAN);
            print!(" {:>8.4} ({:>4.1}s)", dice, t.elapsed().as_secs_f64());
        }
        println!();
    }
    Ok(())
}
