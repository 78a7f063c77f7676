//! Source-only vs adapted UAR on the canonical synthetic shift task, plus the
//! single-term ablations.
//!
//! `cargo run --release --example shift_benchmark -- seeds=0,1,2 lambda=0.1 lr_adapt=0.001`
//!
//! Any hyperparameter key is accepted as `key=value`; `seeds` picks the seeds
//! and `full_only=1` skips the ablations.

use std::time::Instant;

use ecan::eval::evaluate;
use ecan::trainer::{adapt, pretrain, Ablation};
use ecan::{generate_pair, HyperParams, ModelSpec, ShiftSpec};

fn main() -> ecan::Result<()> {
    let mut seeds: Vec<u64> = (0..5).collect();
    let mut full_only = false;
    let mut overrides = serde_json::Map::new();
    for arg in std::env::args().skip(1) {
        let (key, value) = arg.split_once('=').expect("expected key=value");
        match key {
            "seeds" => seeds = value.split(',').map(|x| x.parse().expect("seed")).collect(),
            "full_only" => full_only = value == "1",
            _ => {
                let v: serde_json::Value = serde_json::from_str(value).expect("json value");
                overrides.insert(key.to_string(), v);
            }
        }
    }
    let variants = [
        ("full", Ablation::FULL),
        ("w/o ncl", Ablation { disable_ncl: true, ..Ablation::FULL }),
        ("w/o scl", Ablation { disable_scl: true, ..Ablation::FULL }),
        ("w/o div", Ablation { disable_div: true, ..Ablation::FULL }),
    ];
    let start = Instant::now();
    let mut source_uar = Vec::new();
    let mut adapted_uar = vec![Vec::new(); variants.len()];
    let mut cq_gains = 0;
    let count = if full_only { 1 } else { variants.len() };
    for seed in seeds {
        let (source, target) = generate_pair(&ShiftSpec::canonical(seed))?;
        let mut fields = overrides.clone();
        fields.insert("seed".into(), seed.into());
        let hp: HyperParams = serde_json::from_value(fields.into()).expect("hyperparameters");
        let spec = ModelSpec::new(source.dim(), vec![64], 32, source.class_count());
        let model = pretrain(&source, spec, &hp)?;
        let before = evaluate(&model, &target)?;
        source_uar.push(before.uar);
        print!(
            "seed {seed}: source-only {:.4} (cq {:.4})",
            before.uar,
            before.cluster_quality.unwrap_or(f64::NAN)
        );
        for &(name, ablation) in &variants[..count] {
            let (adapted, _) = adapt(model.clone(), &target.without_labels(), &hp, ablation)?;
            let after = evaluate(&adapted, &target)?;
            if name == "full" && after.cluster_quality > before.cluster_quality {
                cq_gains += 1;
            }
            adapted_uar[variants.iter().position(|v| v.0 == name).unwrap()].push(after.uar);
            print!(
                " | {name} {:.4} (cq {:.4})",
                after.uar,
                after.cluster_quality.unwrap_or(f64::NAN)
            );
        }
        println!();
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let wins = source_uar.iter().zip(&adapted_uar[0]).filter(|(s, a)| a > s).count();
    print!(
        "mean source-only {:.4} | full {:.4} (wins {wins}, cq gains {cq_gains})",
        mean(&source_uar),
        mean(&adapted_uar[0])
    );
    for (i, (name, _)) in variants.iter().enumerate().skip(1).take(count - 1) {
        print!(" | {name} {:.4}", mean(&adapted_uar[i]));
    }
    println!();
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
