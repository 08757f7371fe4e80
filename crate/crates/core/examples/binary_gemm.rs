//! Packs random +-1 matrices into bits and multiplies them with XNOR and
//! popcount, checking the result against a float product and timing both.

use std::time::Instant;

use bcnn::bitcore::{bin_gemm, BitMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> bcnn::Result<()> {
    let (m, k, n) = (128, 1024, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pm1 = |len: usize| -> Vec<f32> { (0..len).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect() };
    let a = pm1(m * k);
    let bt = pm1(n * k);

    let start = Instant::now();
    let pa = BitMatrix::pack_rows(m, k, &a)?;
    let pb = BitMatrix::pack_rows(n, k, &bt)?;
    let c = bin_gemm(&pa, &pb)?;
    let binary = start.elapsed();

    let start = Instant::now();
    let reference: Vec<f32> = (0..m * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            a[i * k..(i + 1) * k].iter().zip(&bt[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum()
        })
        .collect();
    let naive = start.elapsed();

    let agree = c.values().iter().zip(&reference).all(|(&x, &y)| x as f32 == y);
    println!("{m}x{k} times {k}x{n}: results agree {agree}");
    println!("packed {} u64 words per row instead of {k} floats", pa.words_per_row());
    println!("binary {binary:?} (including packing), naive float {naive:?}");
    Ok(())
}
