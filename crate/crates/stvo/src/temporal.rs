//! Temporal propagation: per-keyframe motion states, warping them along
//! current flow estimates, and the temporal encoder that fuses correlation
//! features with warped motion states.

use crate::diff::{bilinear_warp_forward, DenseArray, Padding, Tape, Var, WeightStore};
use crate::error::{Error, Result};
use crate::lie::{FlowField, Mask};

/// Fresh motion state for a newly admitted keyframe: seeded Gaussian with
/// stddev 0.1, reproducible per (seed, keyframe index).
pub fn init_motion_state(
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
    keyframe_index: usize,
) -> DenseArray {
    // distinct stream per keyframe; the multiplier spreads indices across
    // the seed space so neighboring keyframes do not share leading draws
    let stream = seed ^ (keyframe_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    DenseArray::seeded_gaussian(&[channels, height, width], stream, 0.1)
}

/// Flow field as a [2, H, W] array (u then v), the layout the warp expects.
pub fn flow_to_array(flow: &FlowField) -> DenseArray {
    let mut data = Vec::with_capacity(2 * flow.u.len());
    data.extend_from_slice(&flow.u);
    data.extend_from_slice(&flow.v);
    DenseArray::from_vec(&[2, flow.height, flow.width], data).expect("flow layout")
}

/// [2, H, W] array back to a flow field.
pub fn array_to_flow(a: &DenseArray) -> Result<FlowField> {
    if a.shape().len() != 3 || a.channels() != 2 {
        return Err(Error::ShapeMismatch(format!("flow array {:?}", a.shape())));
    }
    let (h, w) = a.hw();
    Ok(FlowField {
        width: w,
        height: h,
        u: a.data()[..h * w].to_vec(),
        v: a.data()[h * w..].to_vec(),
    })
}

/// Warp a source motion state along the edge's flow: out[p] = bilinear
/// sample of `m_source` at p + flow[p]; out-of-bounds pixels are zero with a
/// false mask.
pub fn warp_motion(m_source: &DenseArray, flow: &FlowField) -> Result<(DenseArray, Mask)> {
    let (out, mask) = bilinear_warp_forward(m_source, &flow_to_array(flow))?;
    Ok((out, Mask { width: flow.width, height: flow.height, data: mask }))
}

/// The temporal encoder: a cascaded two-layer 3x3 convolution over the
/// channel-concatenated (F_corr, M_T, warp-mask) input, split into the
/// motion feature F_motion and the edge-local next state m_{m->n}.
pub struct TemporalEncoder {
    conv1: Var,
    bias1: Var,
    conv2: Var,
    bias2: Var,
    d_motion: usize,
    d_state: usize,
}

/// Register the encoder weights: `corr_channels` of correlation feature,
/// 3*D_m of temporal motion state, plus one warp-mask channel.
pub fn init_temporal_weights(
    store: &mut WeightStore,
    corr_channels: usize,
    d_state: usize,
    d_motion: usize,
) {
    let c_in = corr_channels + 3 * d_state + 1;
    store.init_conv("tpm.conv1", d_motion, c_in, 3);
    store.init_conv("tpm.conv2", d_motion + d_state, d_motion, 3);
}

impl TemporalEncoder {
    pub fn load(
        tape: &mut Tape,
        store: &WeightStore,
        d_state: usize,
        d_motion: usize,
    ) -> Result<Self> {
        Ok(TemporalEncoder {
            conv1: tape.input(store.get("tpm.conv1")?.clone()),
            bias1: tape.input(store.get("tpm.conv1.bias")?.clone()),
            conv2: tape.input(store.get("tpm.conv2")?.clone()),
            bias2: tape.input(store.get("tpm.conv2.bias")?.clone()),
            d_motion,
            d_state,
        })
    }

    /// Returns (F_motion [D_M, H, W], m_{m->n} [D_m, H, W]).
    pub fn encode(
        &self,
        tape: &mut Tape,
        f_corr: Var,
        m_temporal: Var,
        warp_mask: Var,
    ) -> Result<(Var, Var)> {
        let input = tape.concat_channels(&[f_corr, m_temporal, warp_mask])?;
        let mid = tape.conv2d(input, self.conv1, Some(self.bias1), 1, Padding::Same)?;
        let mid = tape.relu(mid);
        let out = tape.conv2d(mid, self.conv2, Some(self.bias2), 1, Padding::Same)?;
        let f_motion = tape.slice_channels(out, 0, self.d_motion)?;
        let m_next = tape.slice_channels(out, self.d_motion, self.d_motion + self.d_state)?;
        Ok((f_motion, m_next))
    }
}

/// Next motion state for source frame `source`: the arithmetic mean of the
/// edge-local states over its target set.
pub fn propagate_back(source: usize, locals: &[DenseArray]) -> Result<DenseArray> {
    let Some(first) = locals.first() else {
        return Err(Error::EmptyTargetSet(source));
    };
    let mut mean = first.clone();
    for local in &locals[1..] {
        if local.shape() != mean.shape() {
            return Err(Error::ShapeMismatch(format!(
                "propagate_back {:?} vs {:?}",
                local.shape(),
                mean.shape()
            )));
        }
        for (m, v) in mean.data_mut().iter_mut().zip(local.data()) {
            *m += v;
        }
    }
    let inv = 1.0 / locals.len() as f64;
    for m in mean.data_mut() {
        *m *= inv;
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_index_dependent() {
        let a = init_motion_state(4, 6, 8, 7, 0);
        let b = init_motion_state(4, 6, 8, 7, 0);
        assert_eq!(a.data(), b.data());
        let c = init_motion_state(4, 6, 8, 7, 1);
        assert_ne!(a.data(), c.data());
        let d = init_motion_state(4, 6, 8, 8, 0);
        assert_ne!(a.data(), d.data());
    }

    fn ramp_flow(h: usize, w: usize, du: f64, dv: f64) -> FlowField {
        let mut f = FlowField::zeros(w, h);
        f.u.iter_mut().for_each(|u| *u = du);
        f.v.iter_mut().for_each(|v| *v = dv);
        f
    }

    #[test]
    fn zero_flow_warp_is_bitwise_identity() {
        let m = DenseArray::seeded_gaussian(&[3, 5, 7], 2, 1.0);
        let (out, mask) = warp_motion(&m, &FlowField::zeros(7, 5)).unwrap();
        assert_eq!(out.data(), m.data());
        assert_eq!(mask.count_true(), 35);
    }

    #[test]
    fn constant_state_warps_to_constant_interior() {
        let m = DenseArray::constant(&[2, 5, 7], 1.25);
        let (out, mask) = warp_motion(&m, &ramp_flow(5, 7, 0.5, -0.25)).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                if mask.at(x, y) {
                    for c in 0..2 {
                        assert_eq!(out.data()[c * 35 + y * 7 + x], 1.25);
                    }
                }
            }
        }
        assert!(mask.count_true() > 20);
    }

    #[test]
    fn ramp_state_fractional_flow_is_linear_exact() {
        // state value = x + 10 y, so a (0.3, 0.6) shift adds 0.3 + 6.0
        let (h, w) = (6usize, 8usize);
        let mut m = DenseArray::zeros(&[1, h, w]);
        for y in 0..h {
            for x in 0..w {
                m.data_mut()[y * w + x] = x as f64 + 10.0 * y as f64;
            }
        }
        let (out, mask) = warp_motion(&m, &ramp_flow(h, w, 0.3, 0.6)).unwrap();
        for y in 0..h {
            for x in 0..w {
                if mask.at(x, y) {
                    let want = (x as f64 + 0.3) + 10.0 * (y as f64 + 0.6);
                    assert!((out.data()[y * w + x] - want).abs() < 1e-12);
                }
            }
        }
    }

    fn encode_setup(
        store: &WeightStore,
        corr_c: usize,
        d_state: usize,
        d_motion: usize,
        seed: u64,
    ) -> (Tape, Var, Var, Var, TemporalEncoder) {
        let (h, w) = (4usize, 5usize);
        let mut tape = Tape::inference();
        let f_corr = tape.input(DenseArray::seeded_gaussian(&[corr_c, h, w], seed, 1.0));
        let m_t = tape.input(DenseArray::seeded_gaussian(&[3 * d_state, h, w], seed ^ 1, 1.0));
        let mask = tape.input(DenseArray::constant(&[1, h, w], 1.0));
        let enc = TemporalEncoder::load(&mut tape, store, d_state, d_motion).unwrap();
        (tape, f_corr, m_t, mask, enc)
    }

    #[test]
    fn zero_weights_encode_to_biases() {
        let mut store = WeightStore::new(0, "kaiming-uniform");
        init_temporal_weights(&mut store, 6, 3, 5);
        store.insert("tpm.conv1", DenseArray::zeros(&[5, 16, 3, 3]));
        store.insert("tpm.conv2", DenseArray::zeros(&[8, 5, 3, 3]));
        let mut bias2 = DenseArray::zeros(&[8]);
        for (i, b) in bias2.data_mut().iter_mut().enumerate() {
            *b = i as f64 * 0.5 - 1.0;
        }
        store.insert("tpm.conv2.bias", bias2.clone());
        let (mut tape, f_corr, m_t, mask, enc) = encode_setup(&store, 6, 3, 5, 3);
        let (f_motion, m_next) = enc.encode(&mut tape, f_corr, m_t, mask).unwrap();
        for c in 0..5 {
            for v in &tape.value(f_motion).data()[c * 20..(c + 1) * 20] {
                assert_eq!(*v, bias2.data()[c]);
            }
        }
        for c in 0..3 {
            for v in &tape.value(m_next).data()[c * 20..(c + 1) * 20] {
                assert_eq!(*v, bias2.data()[5 + c]);
            }
        }
    }

    #[test]
    fn encode_matches_composed_conv_oracle() {
        use crate::diff::conv2d_forward;
        let mut store = WeightStore::new(17, "kaiming-uniform");
        init_temporal_weights(&mut store, 6, 3, 5);
        let (mut tape, f_corr, m_t, mask, enc) = encode_setup(&store, 6, 3, 5, 9);
        let input = {
            let mut data = tape.value(f_corr).data().to_vec();
            data.extend_from_slice(tape.value(m_t).data());
            data.extend_from_slice(tape.value(mask).data());
            DenseArray::from_vec(&[16, 4, 5], data).unwrap()
        };
        let (f_motion, m_next) = enc.encode(&mut tape, f_corr, m_t, mask).unwrap();
        let mut mid = conv2d_forward(
            &input,
            store.get("tpm.conv1").unwrap(),
            Some(store.get("tpm.conv1.bias").unwrap()),
            1,
            Padding::Same,
        )
        .unwrap();
        mid.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let out = conv2d_forward(
            &mid,
            store.get("tpm.conv2").unwrap(),
            Some(store.get("tpm.conv2.bias").unwrap()),
            1,
            Padding::Same,
        )
        .unwrap();
        for (i, v) in tape.value(f_motion).data().iter().enumerate() {
            assert!((v - out.data()[i]).abs() < 1e-12);
        }
        for (i, v) in tape.value(m_next).data().iter().enumerate() {
            assert!((v - out.data()[5 * 20 + i]).abs() < 1e-12);
        }
    }

    #[test]
    fn propagate_single_target_is_bitwise() {
        let local = DenseArray::seeded_gaussian(&[4, 3, 3], 5, 1.0);
        let out = propagate_back(0, std::slice::from_ref(&local)).unwrap();
        assert_eq!(out.data(), local.data());
    }

    #[test]
    fn propagate_mean_of_two() {
        let a = DenseArray::seeded_gaussian(&[2, 3, 3], 6, 1.0);
        let b = DenseArray::seeded_gaussian(&[2, 3, 3], 7, 1.0);
        let out = propagate_back(1, &[a.clone(), b.clone()]).unwrap();
        for i in 0..out.len() {
            assert!((out.data()[i] - 0.5 * (a.data()[i] + b.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn propagate_is_permutation_invariant() {
        let locals: Vec<DenseArray> =
            (0..5).map(|s| DenseArray::seeded_gaussian(&[3, 4, 4], 100 + s, 1.0)).collect();
        let forward = propagate_back(0, &locals).unwrap();
        let mut reversed = locals.clone();
        reversed.reverse();
        let backward = propagate_back(0, &reversed).unwrap();
        for (a, b) in forward.data().iter().zip(backward.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_target_set_is_an_error() {
        assert!(matches!(propagate_back(3, &[]), Err(Error::EmptyTargetSet(3))));
    }

    /// Stability smoke test: a two-keyframe graph iterated 15 times with
    /// untrained weights must not blow up.
    #[test]
    fn fifteen_iterations_stay_bounded() {
        let (corr_c, d_state, d_motion) = (6usize, 3usize, 5usize);
        let (h, w) = (6usize, 8usize);
        let mut store = WeightStore::new(23, "kaiming-uniform");
        init_temporal_weights(&mut store, corr_c, d_state, d_motion);
        let mut states =
            [init_motion_state(d_state, h, w, 23, 0), init_motion_state(d_state, h, w, 23, 1)];
        let flows = [ramp_flow(h, w, 0.7, -0.4), ramp_flow(h, w, -0.7, 0.4)];
        for iter in 0..15 {
            let mut locals: Vec<Vec<DenseArray>> = vec![Vec::new(), Vec::new()];
            for (src, tgt) in [(0usize, 1usize), (1, 0)] {
                let (warped, mask) = warp_motion(&states[src], &flows[src]).unwrap();
                let mut tape = Tape::inference();
                let enc = TemporalEncoder::load(&mut tape, &store, d_state, d_motion).unwrap();
                let f_corr = tape.input(DenseArray::seeded_gaussian(
                    &[corr_c, h, w],
                    1000 + iter,
                    0.5,
                ));
                let m_src = tape.input(states[src].clone());
                let m_warp = tape.input(warped);
                let m_tgt = tape.input(states[tgt].clone());
                let m_t = tape.concat_channels(&[m_src, m_warp, m_tgt]).unwrap();
                let mask_var = tape.input(DenseArray::from_vec(
                    &[1, h, w],
                    mask.data.iter().map(|m| *m as u8 as f64).collect(),
                )
                .unwrap());
                let (_, m_next) = enc.encode(&mut tape, f_corr, m_t, mask_var).unwrap();
                locals[src].push(tape.value(m_next).clone());
            }
            for s in 0..2 {
                states[s] = propagate_back(s, &locals[s]).unwrap();
                assert!(states[s].is_finite());
                assert!(states[s].max_abs() < 1e3, "iteration {iter} state {s} diverged");
            }
        }
    }

    #[test]
    fn init_scale_is_small() {
        let m = init_motion_state(8, 6, 8, 3, 2);
        let n = m.len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05);
        assert!((var.sqrt() - 0.1).abs() < 0.02);
    }
}
