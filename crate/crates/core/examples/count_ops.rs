//! Parameter and operation counts for the ImageNet-scale networks with one
//! and two parallel branches, plus the share of real parameters in the
//! classifier.

use bcnn::complexity::{count_ops, decoder_share, render_table};
use bcnn::network::NetworkConfig;

fn main() {
    let columns: Vec<_> = [1, 2]
        .into_iter()
        .map(|p| (format!("P={p}"), count_ops(&NetworkConfig::imagenet(p), 224)))
        .collect();
    print!("{}", render_table(&columns, true));
    for p in [1, 2] {
        println!("P={p}: classifier holds {:.1}% of real parameters", 100.0 * decoder_share(&NetworkConfig::imagenet(p)));
    }
}
