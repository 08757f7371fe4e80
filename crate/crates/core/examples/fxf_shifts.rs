//! A binary 3x3 convolution expressed as nine parallel 1x1 branches, each
//! reading the input at one window offset, compared with a direct 3x3
//! convolution written out by hand.

use bcnn::bitcore::RealTensor;
use bcnn::blocks::{fxf_shifts, fxf_via_shifts, ConvModule1x1, WeightMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> bcnn::Result<()> {
    let (c, h, w) = (4, 6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut module = ConvModule1x1::new(c, 9, true, &mut rng);
    module.weight_mode = WeightMode::Binary;
    let x = RealTensor::from_fn(vec![c, h, w], |_| rng.gen_range(-1.0..1.0));
    let y = fxf_via_shifts(&module, &x)?;

    let shifts = fxf_shifts(3);
    println!("window offsets: {shifts:?}");
    let xv = x.values();
    let sgn = |v: f32| if v >= 0.0 { 1.0 } else { -1.0 };
    let mut max_diff = 0.0f32;
    for o in 0..c {
        let slope = module.prelu_slope.as_ref().unwrap()[o];
        for i in 0..h {
            for j in 0..w {
                let mut acc = xv[(o * h + i) * w + j];
                for (branch, &(dy, dx)) in module.branches.iter().zip(&shifts) {
                    // branch at offset (dy, dx) reads x[i - dy, j - dx]: convolution, not correlation
                    let (si, sj) = (i as isize - dy, j as isize - dx);
                    let inside = (0..h as isize).contains(&si) && (0..w as isize).contains(&sj);
                    let mut dot = 0.0;
                    for ci in 0..c {
                        let v = if inside { xv[(ci * h + si as usize) * w + sj as usize] } else { 0.0 };
                        dot += sgn(branch.weights_real[o * c + ci]) * sgn(v + branch.bias[ci]);
                    }
                    let (scale, shift) = branch.bn.folded();
                    acc += dot * scale[o] + shift[o];
                }
                let direct = if acc >= 0.0 { acc } else { slope * acc };
                max_diff = max_diff.max((direct - y.values()[(o * h + i) * w + j]).abs());
            }
        }
    }
    println!("output {:?}, max difference from the direct 3x3 convolution {max_diff:e}", y.shape());
    Ok(())
}
