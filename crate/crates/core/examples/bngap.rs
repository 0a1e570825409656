//! Batch-norm gap ratio as the OOD share of the batch grows.
//!
//! `cargo run --release -p rna-core --example bngap [epochs]`

use rna_core::data::synthetic::ToySpec;
use rna_core::data::ImageSet;
use rna_core::model::{ModelBundle, ModelConfig};
use rna_core::training::{probe_bn_gap, train, TrainConfig};

fn main() -> rna_core::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let spec = ToySpec::default();
    let data = spec.build::<f32>()?;
    let mut ood_test = ImageSet::empty(spec.shape);
    for set in data.ood_tests.values() {
        set.iter().for_each(|img| ood_test.push(img));
    }
    for b_ood in [32, 128, 512] {
        let mut cfg = TrainConfig::default();
        cfg.optim.epochs = epochs;
        cfg.batch_ood = b_ood;
        cfg.probe_size = 0;
        let mut model = ModelBundle::<f32>::new(ModelConfig::small(spec.shape, spec.num_classes), data.prior()?, 7)?;
        train(&mut model, &data, &cfg)?;
        let test = probe_bn_gap(&model, &data.id_test.images, &ood_test)?;
        let aux = probe_bn_gap(&model, &data.id_train.images, &data.aux_ood)?;
        println!(
            "128:{b_ood}  test ratio {:.3} (gaps {:.3} {:.3})  train/aux ratio {:.3}",
            test.ratio, test.id_gap, test.ood_gap, aux.ratio
        );
    }
    Ok(())
}
