//! Writes a model file, reads it back, checks that inference is bit-identical,
//! then shows the typed errors for a truncated and a mislabelled file.

use bcnn::network::format::{from_bytes, to_bytes};
use bcnn::network::{build_model, load_model, save_model, NetworkConfig};
use bcnn::training::{synthetic_gratings, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = build_model(&NetworkConfig::toy(), 11)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("toy.bcnn");
    save_model(&model, &path)?;
    let loaded = load_model(&path)?;
    let size = std::fs::metadata(&path)?.len();
    println!("wrote {} ({size} bytes)", path.display());

    let data = synthetic_gratings(&SyntheticSpec { train: 10, test: 5, ..SyntheticSpec::default() })?;
    let identical = (0..data.test.len()).try_fold(true, |ok, i| {
        let x = data.test.image(i)?;
        Ok::<_, bcnn::Error>(ok && model.forward(&x)? == loaded.forward(&x)?)
    })?;
    println!("logits identical after reload: {identical}");

    let bytes = to_bytes(&model)?;
    println!("truncated: {}", from_bytes(&bytes[..bytes.len() / 2]).unwrap_err());
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    println!("bad magic: {}", from_bytes(&bad).unwrap_err());
    Ok(())
}
