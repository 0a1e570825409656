//! Desk-scale comparison of training objectives on the toy grating data.
//!
//! `cargo run --release -p rna-core --example desk [epochs]`

use std::time::Instant;

use rna_core::data::assign_class_groups;
use rna_core::data::synthetic::ToySpec;
use rna_core::evaluation::{evaluate, EvalConfig};
use rna_core::losses::{IdLoss, LossConfig, OodTerm};
use rna_core::model::{activation_ratio, ModelBundle, ModelConfig};
use rna_core::training::{probe_norm_stats, train, TrainConfig};

fn main() -> rna_core::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let lambda: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let only: Option<String> = std::env::args().nth(3);
    let mut spec = ToySpec::default();
    let seed: u64 = std::env::var("SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    spec.seed = seed;
    if let Some(n) = std::env::var("NOISE").ok().and_then(|s| s.parse().ok()) {
        spec.noise = n;
    }
    if let Ok(list) = std::env::var("AUX_FAMILIES") {
        spec.aux_families = list.split(',').filter_map(rna_core::data::synthetic::OutlierFamily::parse).collect();
    }
    if let Ok(list) = std::env::var("TEST_FAMILIES") {
        spec.test_families = list.split(',').filter_map(rna_core::data::synthetic::OutlierFamily::parse).collect();
    }
    let data = spec.build::<f32>()?;
    let groups = assign_class_groups(&data.train_counts())?;
    println!("train counts {:?}", data.train_counts());
    let runs = [
        ("CE", IdLoss::Ce, OodTerm::None, 0),
        ("LA+OE", IdLoss::La, OodTerm::Oe, 128),
        ("LA+RNA", IdLoss::La, OodTerm::Rna, 128),
    ];
    for (name, id_loss, term, b_ood) in runs {
        if only.as_deref().is_some_and(|o| o != name) {
            continue;
        }
        let t = Instant::now();
        let mut cfg = TrainConfig::default();
        cfg.loss = LossConfig::with_terms(id_loss, term, lambda);
        cfg.optim.epochs = epochs;
        cfg.batch_ood = b_ood;
        cfg.probe_size = 0;
        let mut model = ModelBundle::<f32>::new(ModelConfig::small(spec.shape, spec.num_classes), data.prior()?, 7 + seed)?;
        let series = train(&mut model, &data, &cfg)?;
        let (_, report) = evaluate(&model, &data, &groups, &EvalConfig::default())?;
        let norms = probe_norm_stats(&model, &data, 1000, 20)?;
        let id_out = model.forward_eval(data.id_test.images.pixels(), data.id_test.len())?;
        let mut ood_ratio = Vec::new();
        for set in data.ood_tests.values() {
            ood_ratio.push(activation_ratio(&model.forward_eval(set.pixels(), set.len())?.features)?);
        }
        println!(
            "{name}: loss {:.3} time {:.1}s acc {:.3} few {:.3} act id {:.3} ood {:?}",
            series.final_loss().unwrap_or(f64::NAN),
            t.elapsed().as_secs_f64(),
            report.accuracy.total,
            report.accuracy.few,
            activation_ratio(&id_out.features)?,
            ood_ratio
        );
        println!("  norms {:?}", norms.means);
        for (s, m) in &report.averages {
            println!("  {s}: auc {:.3} aupr {:.3} fpr {:.3}", m.auc, m.aupr, m.fpr95);
        }
    }
    Ok(())
}
