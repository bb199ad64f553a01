//! Feature extraction at 1/8 input resolution and the RAFT-style correlation
//! pyramid with windowed bilinear lookup.

use crate::diff::{DenseArray, Padding, Tape, WeightStore};
use crate::error::{Error, Result};

/// Matching and context features for one frame, both at 1/8 resolution.
pub struct FeaturePair {
    /// [D_f, H, W], used to build correlation volumes.
    pub matching: DenseArray,
    /// [D_c, H, W], fed to the update operator.
    pub context: DenseArray,
}

/// Stack of L correlation volumes. Level l has shape [H, W, H/2^l, W/2^l];
/// each level halves the *target* dimensions by 2x2 average pooling.
pub struct CorrPyramid {
    levels: Vec<DenseArray>,
}

/// Internal encoder widths of the three stride-2 stages.
const STAGE_CHANNELS: [usize; 3] = [32, 64, 96];

/// Register the feature encoder's weights in `store` (Kaiming-uniform from
/// the store's seed). Call once before [`extract_features`].
pub fn init_feature_weights(store: &mut WeightStore, d_f: usize, d_c: usize) {
    let mut c_in = 1;
    for (s, &c_out) in STAGE_CHANNELS.iter().enumerate() {
        store.init_conv(&format!("fnet.stage{s}.down"), c_out, c_in, 3);
        store.init_conv(&format!("fnet.stage{s}.res1"), c_out, c_out, 3);
        store.init_conv(&format!("fnet.stage{s}.res2"), c_out, c_out, 3);
        c_in = c_out;
    }
    store.init_conv("fnet.head_matching", d_f, c_in, 1);
    store.init_conv("fnet.head_context", d_c, c_in, 1);
}

/// Deterministic convolutional encoder: three stride-2 stages, each a 3x3
/// downsampling conv followed by a two-conv residual block, then 1x1 heads
/// for matching and context features.
pub fn extract_features(image: &DenseArray, store: &WeightStore) -> Result<FeaturePair> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::BadDimensions(format!("expected [1, H, W] image, got {shape:?}")));
    }
    let (h, w) = image.hw();
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::BadDimensions(format!("image {h}x{w} not divisible by 8")));
    }
    let mut tape = Tape::inference();
    let mut x = tape.input(image.clone());
    let conv = |tape: &mut Tape, x, name: &str, stride| -> Result<_> {
        let k = tape.input(store.get(name)?.clone());
        let b = tape.input(store.get(&format!("{name}.bias"))?.clone());
        tape.conv2d(x, k, Some(b), stride, Padding::Same)
    };
    for s in 0..3 {
        let down = conv(&mut tape, x, &format!("fnet.stage{s}.down"), 2)?;
        let down = tape.relu(down);
        let r1 = conv(&mut tape, down, &format!("fnet.stage{s}.res1"), 1)?;
        let r1 = tape.relu(r1);
        let r2 = conv(&mut tape, r1, &format!("fnet.stage{s}.res2"), 1)?;
        x = tape.add(down, r2)?;
        x = tape.relu(x);
    }
    let matching = conv(&mut tape, x, "fnet.head_matching", 1)?;
    let context = conv(&mut tape, x, "fnet.head_context", 1)?;
    Ok(FeaturePair {
        matching: tape.value(matching).clone(),
        context: tape.value(context).clone(),
    })
}

impl CorrPyramid {
    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &DenseArray {
        &self.levels[l]
    }
}

/// Correlation pyramid between two feature rasters. Level 0 holds
/// dot(feat_i[p], feat_j[q]) / sqrt(D_f); each further level average-pools
/// the target dimensions 2x2.
pub fn build_pyramid(feat_i: &DenseArray, feat_j: &DenseArray, levels: usize) -> Result<CorrPyramid> {
    if feat_i.shape() != feat_j.shape() || feat_i.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "pyramid features {:?} vs {:?}",
            feat_i.shape(),
            feat_j.shape()
        )));
    }
    let d = feat_i.channels();
    let (h, w) = feat_i.hw();
    if levels == 0 || h % (1 << (levels - 1)) != 0 || w % (1 << (levels - 1)) != 0 {
        return Err(Error::BadDimensions(format!("{h}x{w} not poolable to {levels} levels")));
    }
    let hw = h * w;
    let norm = 1.0 / (d as f64).sqrt();
    let mut level0 = DenseArray::zeros(&[h, w, h, w]);
    {
        let out = level0.data_mut();
        let (fi, fj) = (feat_i.data(), feat_j.data());
        for p in 0..hw {
            for q in 0..hw {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += fi[c * hw + p] * fj[c * hw + q];
                }
                out[p * hw + q] = acc * norm;
            }
        }
    }
    let mut pyr = CorrPyramid { levels: vec![level0] };
    for l in 1..levels {
        let prev = &pyr.levels[l - 1];
        let (ph, pw) = (prev.shape()[2], prev.shape()[3]);
        let (nh, nw) = (ph / 2, pw / 2);
        let mut next = DenseArray::zeros(&[h, w, nh, nw]);
        {
            let out = next.data_mut();
            let src = prev.data();
            for p in 0..hw {
                let base = p * ph * pw;
                for y in 0..nh {
                    for x in 0..nw {
                        let s = src[base + (2 * y) * pw + 2 * x]
                            + src[base + (2 * y) * pw + 2 * x + 1]
                            + src[base + (2 * y + 1) * pw + 2 * x]
                            + src[base + (2 * y + 1) * pw + 2 * x + 1];
                        out[p * nh * nw + y * nw + x] = 0.25 * s;
                    }
                }
            }
        }
        pyr.levels.push(next);
    }
    Ok(pyr)
}

/// Bilinear sample of the target slice for source pixel `p` at fractional
/// target coordinates (x, y). Corners outside the volume contribute zero
/// (zero-padded sampling).
fn sample_level(level: &DenseArray, p: usize, x: f64, y: f64) -> f64 {
    let (th, tw) = (level.shape()[2], level.shape()[3]);
    let base = p * th * tw;
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let (cx, cy) = (x0 as i64 + dx, y0 as i64 + dy);
            if wx * wy != 0.0 && cx >= 0 && cy >= 0 && (cx as usize) < tw && (cy as usize) < th {
                acc += wx * wy * level.data()[base + cy as usize * tw + cx as usize];
            }
        }
    }
    acc
}

/// Gather a (2R+1)^2 window at each pyramid level around the correspondence
/// (absolute level-0 target coordinates, shape [2, H, W]), bilinearly
/// sampled, concatenated level-major into [(2R+1)^2 * L, H, W].
pub fn lookup(pyr: &CorrPyramid, correspondence: &DenseArray, radius: usize) -> Result<DenseArray> {
    let (h, w) = (pyr.levels[0].shape()[0], pyr.levels[0].shape()[1]);
    if correspondence.shape() != [2, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "correspondence {:?} vs [2, {h}, {w}]",
            correspondence.shape()
        )));
    }
    let win = 2 * radius + 1;
    let l = pyr.levels.len();
    let hw = h * w;
    let mut out = DenseArray::zeros(&[win * win * l, h, w]);
    for (lvl, level) in pyr.levels.iter().enumerate() {
        let scale = 1.0 / (1 << lvl) as f64;
        for p in 0..hw {
            let cx = correspondence.data()[p] * scale;
            let cy = correspondence.data()[hw + p] * scale;
            for dy in 0..win {
                for dx in 0..win {
                    let x = cx + dx as f64 - radius as f64;
                    let y = cy + dy as f64 - radius as f64;
                    let ch = lvl * win * win + dy * win + dx;
                    out.data_mut()[ch * hw + p] = sample_level(level, p, x, y);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_features(shape: &[usize], seed: u64) -> DenseArray {
        DenseArray::seeded_gaussian(shape, seed, 1.0)
    }

    #[test]
    fn extract_shapes_at_vga_like_resolution() {
        let mut store = WeightStore::new(1, "kaiming-uniform");
        init_feature_weights(&mut store, 8, 6);
        let image = random_features(&[1, 384, 512], 2);
        let pair = extract_features(&image, &store).unwrap();
        assert_eq!(pair.matching.shape(), &[8, 48, 64]);
        assert_eq!(pair.context.shape(), &[6, 48, 64]);
    }

    #[test]
    fn extract_rejects_bad_dimensions() {
        let mut store = WeightStore::new(1, "kaiming-uniform");
        init_feature_weights(&mut store, 4, 4);
        let image = DenseArray::zeros(&[1, 50, 64]);
        assert!(matches!(extract_features(&image, &store), Err(Error::BadDimensions(_))));
    }

    #[test]
    fn constant_image_gives_constant_interior_features() {
        let mut store = WeightStore::new(3, "kaiming-uniform");
        init_feature_weights(&mut store, 4, 4);
        let image = DenseArray::constant(&[1, 96, 128], 0.7);
        let pair = extract_features(&image, &store).unwrap();
        // zero padding contaminates a border ring; the receptive field spans
        // about 35 input pixels, i.e. 5 feature pixels at 1/8 resolution
        let (h, w) = pair.matching.hw();
        let margin = 5;
        for c in 0..pair.matching.channels() {
            let reference = pair.matching.data()[c * h * w + margin * w + margin];
            for y in margin..h - margin {
                for x in margin..w - margin {
                    let v = pair.matching.data()[c * h * w + y * w + x];
                    assert!(
                        (v - reference).abs() < 1e-12,
                        "channel {c} pixel ({x},{y}): {v} vs {reference}"
                    );
                }
            }
        }
    }

    #[test]
    fn extract_is_deterministic() {
        let image = random_features(&[1, 64, 48], 5);
        let run = || {
            let mut store = WeightStore::new(11, "kaiming-uniform");
            init_feature_weights(&mut store, 4, 4);
            extract_features(&image, &store).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.matching.data(), b.matching.data());
        assert_eq!(a.context.data(), b.context.data());
    }

    #[test]
    fn one_hot_features_give_identity_pattern() {
        // one distinct one-hot channel per pixel: dot products form identity
        let (h, w) = (2usize, 2usize);
        let hw = h * w;
        let mut feat = DenseArray::zeros(&[hw, h, w]);
        for p in 0..hw {
            feat.data_mut()[p * hw + p] = 1.0;
        }
        let pyr = build_pyramid(&feat, &feat, 1).unwrap();
        let norm = 1.0 / (hw as f64).sqrt();
        for p in 0..hw {
            for q in 0..hw {
                let want = if p == q { norm } else { 0.0 };
                assert_eq!(pyr.level(0).data()[p * hw + q], want);
            }
        }
    }

    #[test]
    fn zero_features_give_zero_pyramid() {
        let feat = DenseArray::zeros(&[4, 4, 4]);
        let pyr = build_pyramid(&feat, &feat, 3).unwrap();
        for l in 0..3 {
            assert_eq!(pyr.level(l).max_abs(), 0.0);
        }
    }

    #[test]
    fn pyramid_matches_naive_oracle() {
        let feat_i = random_features(&[5, 4, 6], 7);
        let feat_j = random_features(&[5, 4, 6], 8);
        let pyr = build_pyramid(&feat_i, &feat_j, 2).unwrap();
        let (d, h, w) = (5usize, 4usize, 6usize);
        let hw = h * w;
        // independent naive loop, indexing from scratch
        for py in 0..h {
            for px in 0..w {
                for qy in 0..h {
                    for qx in 0..w {
                        let mut acc = 0.0;
                        for c in 0..d {
                            acc += feat_i.data()[c * hw + py * w + px]
                                * feat_j.data()[c * hw + qy * w + qx];
                        }
                        acc /= (d as f64).sqrt();
                        let got =
                            pyr.level(0).data()[(py * w + px) * hw + qy * w + qx];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
        // level 1 = 2x2 mean over target dims
        for p in 0..hw {
            for y in 0..2 {
                for x in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += pyr.level(0).data()[p * hw + (2 * y + dy) * w + 2 * x + dx];
                        }
                    }
                    let got = pyr.level(1).data()[p * 6 + y * 3 + x];
                    assert!((got - acc / 4.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn correlation_symmetry() {
        let feat_i = random_features(&[6, 4, 4], 21);
        let feat_j = random_features(&[6, 4, 4], 22);
        let ij = build_pyramid(&feat_i, &feat_j, 1).unwrap();
        let ji = build_pyramid(&feat_j, &feat_i, 1).unwrap();
        let hw = 16;
        for p in 0..hw {
            for q in 0..hw {
                let a = ij.level(0).data()[p * hw + q];
                let b = ji.level(0).data()[q * hw + p];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn identity_grid(h: usize, w: usize) -> DenseArray {
        let mut g = DenseArray::zeros(&[2, h, w]);
        for y in 0..h {
            for x in 0..w {
                g.data_mut()[y * w + x] = x as f64;
                g.data_mut()[h * w + y * w + x] = y as f64;
            }
        }
        g
    }

    #[test]
    fn lookup_identity_grid_r0_gives_diagonal() {
        let feat_i = random_features(&[4, 4, 4], 31);
        let feat_j = random_features(&[4, 4, 4], 32);
        let pyr = build_pyramid(&feat_i, &feat_j, 1).unwrap();
        let out = lookup(&pyr, &identity_grid(4, 4), 0).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4]);
        let hw = 16;
        for p in 0..hw {
            assert!((out.data()[p] - pyr.level(0).data()[p * hw + p]).abs() < 1e-12);
        }
    }

    #[test]
    fn lookup_far_outside_is_zero() {
        let feat = random_features(&[4, 4, 4], 33);
        let pyr = build_pyramid(&feat, &feat, 2).unwrap();
        let far = DenseArray::constant(&[2, 4, 4], 1e6);
        let out = lookup(&pyr, &far, 2).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn lookup_matches_naive_gather_oracle() {
        let feat_i = random_features(&[3, 4, 8], 41);
        let feat_j = random_features(&[3, 4, 8], 42);
        let levels = 2usize;
        let radius = 2usize;
        let pyr = build_pyramid(&feat_i, &feat_j, levels).unwrap();
        let mut corr = DenseArray::seeded_gaussian(&[2, 4, 8], 43, 3.0);
        // push some samples near and past the border
        corr.data_mut()[0] = -1.7;
        corr.data_mut()[1] = 9.3;
        let out = lookup(&pyr, &corr, radius).unwrap();
        let (h, w) = (4usize, 8usize);
        let hw = h * w;
        let win = 2 * radius + 1;
        // independent bilinear gather with explicit corner clipping
        let naive = |lvl: usize, p: usize, x: f64, y: f64| -> f64 {
            let level = pyr.level(lvl);
            let (th, tw) = (level.shape()[2], level.shape()[3]);
            let (x0, y0) = (x.floor() as i64, y.floor() as i64);
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let at = |cx: i64, cy: i64| -> f64 {
                if cx < 0 || cy < 0 || cx >= tw as i64 || cy >= th as i64 {
                    0.0
                } else {
                    level.data()[p * th * tw + cy as usize * tw + cx as usize]
                }
            };
            (1.0 - fx) * (1.0 - fy) * at(x0, y0)
                + fx * (1.0 - fy) * at(x0 + 1, y0)
                + (1.0 - fx) * fy * at(x0, y0 + 1)
                + fx * fy * at(x0 + 1, y0 + 1)
        };
        for lvl in 0..levels {
            for p in 0..hw {
                let cx = corr.data()[p] / (1 << lvl) as f64;
                let cy = corr.data()[hw + p] / (1 << lvl) as f64;
                for dy in 0..win {
                    for dx in 0..win {
                        let want =
                            naive(lvl, p, cx + dx as f64 - radius as f64, cy + dy as f64 - radius as f64);
                        let ch = lvl * win * win + dy * win + dx;
                        let got = out.data()[ch * hw + p];
                        assert!((got - want).abs() < 1e-12, "lvl {lvl} p {p} ({dx},{dy})");
                    }
                }
            }
        }
    }
}
