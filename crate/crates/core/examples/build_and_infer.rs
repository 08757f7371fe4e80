//! Builds the toy network, runs one synthetic image through it in both weight
//! modes and prints the logits. Untrained batch norm is the identity, so the
//! logits are large and the softmax is nearly one-hot.

use bcnn::blocks::WeightMode;
use bcnn::network::{build_model, NetworkConfig};
use bcnn::training::{synthetic_gratings, SyntheticSpec};

fn main() -> bcnn::Result<()> {
    let cfg = NetworkConfig::toy();
    print!("{cfg}");
    let mut model = build_model(&cfg, 0)?;
    let data = synthetic_gratings(&SyntheticSpec { train: 10, test: 1, ..SyntheticSpec::default() })?;
    let x = data.test.image(0)?;
    println!("input {:?}, true class {}", x.shape(), data.test.class_names[data.test.labels[0]]);

    for mode in [WeightMode::Binary, WeightMode::Real] {
        model.set_weight_mode(mode);
        let logits = model.forward(&x)?;
        let z = logits.values();
        let top = (0..z.len()).max_by(|&i, &j| z[i].total_cmp(&z[j])).unwrap_or(0);
        let shown: Vec<String> = z.iter().map(|v| format!("{v:.1}")).collect();
        println!("{mode:?} weights: predicts class {top}; logits {}", shown.join(" "));
    }
    Ok(())
}
