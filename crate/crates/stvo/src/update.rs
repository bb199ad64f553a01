//! The recurrent update operator: a convolutional GRU over fused correlation,
//! spatio-temporal, and context features that emits a revision flow and a
//! confidence raster per edge per iteration.

use crate::diff::{gru_cell, DenseArray, GruWeights, Padding, Tape, Var, WeightStore};
use crate::error::Result;
use crate::lie::FlowField;

/// Revision for one edge: a flow correction and per-component confidence
/// weights in (0, 1).
pub struct Revision {
    pub flow: FlowField,
    /// [2, H, W] sigmoid outputs; feeds the DBA weighting.
    pub confidence: DenseArray,
}

/// Register the GRU and head weights. `input_channels` is the width of the
/// fused input concat(F_ST, C_S, M_T, F_corr); `d_hidden` the GRU state.
pub fn init_update_weights(store: &mut WeightStore, input_channels: usize, d_hidden: usize) {
    let c = d_hidden + input_channels;
    store.init_conv("upd.gru_z", d_hidden, c, 3);
    store.init_conv("upd.gru_r", d_hidden, c, 3);
    store.init_conv("upd.gru_h", d_hidden, c, 3);
    store.init_conv("upd.rev1", d_hidden, d_hidden, 3);
    store.init_conv("upd.rev2", 2, d_hidden, 3);
    store.init_conv("upd.conf1", d_hidden, d_hidden, 3);
    store.init_conv("upd.conf2", 2, d_hidden, 3);
}

/// Weight handles for one tape execution of the update step.
pub struct UpdateOperator {
    pub gru: GruWeights,
    pub rev1: Var,
    pub rev1_bias: Var,
    pub rev2: Var,
    pub rev2_bias: Var,
    pub conf1: Var,
    pub conf1_bias: Var,
    pub conf2: Var,
    pub conf2_bias: Var,
}

impl UpdateOperator {
    pub fn load(tape: &mut Tape, store: &WeightStore) -> Result<Self> {
        let mut var = |name: &str| -> Result<Var> { Ok(tape.input(store.get(name)?.clone())) };
        Ok(UpdateOperator {
            gru: GruWeights {
                conv_z: var("upd.gru_z")?,
                bias_z: var("upd.gru_z.bias")?,
                conv_r: var("upd.gru_r")?,
                bias_r: var("upd.gru_r.bias")?,
                conv_h: var("upd.gru_h")?,
                bias_h: var("upd.gru_h.bias")?,
            },
            rev1: var("upd.rev1")?,
            rev1_bias: var("upd.rev1.bias")?,
            rev2: var("upd.rev2")?,
            rev2_bias: var("upd.rev2.bias")?,
            conf1: var("upd.conf1")?,
            conf1_bias: var("upd.conf1.bias")?,
            conf2: var("upd.conf2")?,
            conf2_bias: var("upd.conf2.bias")?,
        })
    }

    /// One update step: returns (h', revision flow [2,H,W], confidence
    /// [2,H,W]).
    pub fn step(
        &self,
        tape: &mut Tape,
        hidden: Var,
        f_st: Var,
        c_s: Var,
        m_temporal: Var,
        f_corr: Var,
    ) -> Result<(Var, Var, Var)> {
        let input = tape.concat_channels(&[f_st, c_s, m_temporal, f_corr])?;
        let next = gru_cell(tape, hidden, input, &self.gru)?;
        let r_mid = tape.conv2d(next, self.rev1, Some(self.rev1_bias), 1, Padding::Same)?;
        let r_mid = tape.relu(r_mid);
        let revision = tape.conv2d(r_mid, self.rev2, Some(self.rev2_bias), 1, Padding::Same)?;
        let c_mid = tape.conv2d(next, self.conf1, Some(self.conf1_bias), 1, Padding::Same)?;
        let c_mid = tape.relu(c_mid);
        let c_pre = tape.conv2d(c_mid, self.conf2, Some(self.conf2_bias), 1, Padding::Same)?;
        let confidence = tape.sigmoid(c_pre);
        Ok((next, revision, confidence))
    }
}

/// Identity pixel grid [2, H, W]: channel 0 holds x, channel 1 holds y.
pub fn correspondence_grid(width: usize, height: usize) -> DenseArray {
    let mut g = DenseArray::zeros(&[2, height, width]);
    for y in 0..height {
        for x in 0..width {
            g.data_mut()[y * width + x] = x as f64;
            g.data_mut()[height * width + y * width + x] = y as f64;
        }
    }
    g
}

/// Target correspondence field: P~ = grid + current flow + revision.
pub fn apply_revision(flow: &FlowField, revision: &FlowField) -> DenseArray {
    let (w, h) = (flow.width, flow.height);
    let mut out = correspondence_grid(w, h);
    let hw = h * w;
    for p in 0..hw {
        out.data_mut()[p] += flow.u[p] + revision.u[p];
        out.data_mut()[hw + p] += flow.v[p] + revision.v[p];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    const D_H: usize = 4;
    const C_IN: usize = 6;
    const H: usize = 4;
    const W: usize = 4;

    fn inputs(tape: &mut Tape, seed: u64) -> (Var, Var, Var, Var, Var) {
        let hidden = tape.input(DenseArray::seeded_gaussian(&[D_H, H, W], seed, 0.5));
        let f_st = tape.input(DenseArray::seeded_gaussian(&[2, H, W], seed + 1, 1.0));
        let c_s = tape.input(DenseArray::seeded_gaussian(&[1, H, W], seed + 2, 1.0));
        let m_t = tape.input(DenseArray::seeded_gaussian(&[2, H, W], seed + 3, 1.0));
        let f_corr = tape.input(DenseArray::seeded_gaussian(&[1, H, W], seed + 4, 1.0));
        (hidden, f_st, c_s, m_t, f_corr)
    }

    fn zero_store() -> WeightStore {
        let mut store = WeightStore::new(0, "kaiming-uniform");
        init_update_weights(&mut store, C_IN, D_H);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let zero = DenseArray::zeros(store.get(&name).unwrap().shape());
            store.insert(&name, zero);
        }
        store
    }

    #[test]
    fn zero_weights_give_zero_revision_and_half_confidence() {
        let store = zero_store();
        let mut tape = Tape::inference();
        let (h, f_st, c_s, m_t, f_corr) = inputs(&mut tape, 1);
        let op = UpdateOperator::load(&mut tape, &store).unwrap();
        let (_, rev, conf) = op.step(&mut tape, h, f_st, c_s, m_t, f_corr).unwrap();
        assert_eq!(tape.value(rev).max_abs(), 0.0);
        assert!(tape.value(conf).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn revision_head_bias_passes_through_zero_kernels() {
        let mut store = zero_store();
        store.insert("upd.rev2.bias", DenseArray::from_vec(&[2], vec![0.3, -0.2]).unwrap());
        let mut tape = Tape::inference();
        let (h, f_st, c_s, m_t, f_corr) = inputs(&mut tape, 2);
        let op = UpdateOperator::load(&mut tape, &store).unwrap();
        let (_, rev, _) = op.step(&mut tape, h, f_st, c_s, m_t, f_corr).unwrap();
        let hw = H * W;
        for p in 0..hw {
            assert_eq!(tape.value(rev).data()[p], 0.3);
            assert_eq!(tape.value(rev).data()[hw + p], -0.2);
        }
    }

    #[test]
    fn matches_composed_oracle() {
        use crate::diff::conv2d_forward;
        let mut store = WeightStore::new(5, "kaiming-uniform");
        init_update_weights(&mut store, C_IN, D_H);
        let mut tape = Tape::inference();
        let (h, f_st, c_s, m_t, f_corr) = inputs(&mut tape, 3);
        let op = UpdateOperator::load(&mut tape, &store).unwrap();
        let (next, rev, conf) = op.step(&mut tape, h, f_st, c_s, m_t, f_corr).unwrap();

        // independent composition: gru_cell on a fresh tape, heads by direct
        // conv evaluation
        let mut oracle = Tape::inference();
        let (h2, f2, c2, m2, fc2) = inputs(&mut oracle, 3);
        let x2 = oracle.concat_channels(&[f2, c2, m2, fc2]).unwrap();
        let op2 = UpdateOperator::load(&mut oracle, &store).unwrap();
        let next2 = gru_cell(&mut oracle, h2, x2, &op2.gru).unwrap();
        assert_eq!(tape.value(next).data(), oracle.value(next2).data());

        let conv = |x: &DenseArray, name: &str| {
            conv2d_forward(
                x,
                store.get(name).unwrap(),
                Some(store.get(&format!("{name}.bias")).unwrap()),
                1,
                Padding::Same,
            )
            .unwrap()
        };
        let mut mid = conv(oracle.value(next2), "upd.rev1");
        mid.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rev_want = conv(&mid, "upd.rev2");
        for (a, b) in tape.value(rev).data().iter().zip(rev_want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut mid = conv(oracle.value(next2), "upd.conf1");
        mid.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let conf_want = conv(&mid, "upd.conf2");
        for (a, b) in tape.value(conf).data().iter().zip(conf_want.data()) {
            let sig = 1.0 / (1.0 + (-b).exp());
            assert!((a - sig).abs() < 1e-12);
        }
    }

    #[test]
    fn confidence_is_strictly_inside_unit_interval() {
        for seed in 0..10u64 {
            let mut store = WeightStore::new(seed, "kaiming-uniform");
            init_update_weights(&mut store, C_IN, D_H);
            let mut tape = Tape::inference();
            let (h, f_st, c_s, m_t, f_corr) = inputs(&mut tape, seed + 50);
            let op = UpdateOperator::load(&mut tape, &store).unwrap();
            let (_, _, conf) = op.step(&mut tape, h, f_st, c_s, m_t, f_corr).unwrap();
            assert!(tape.value(conf).data().iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn step_is_deterministic() {
        let run = || {
            let mut store = WeightStore::new(7, "kaiming-uniform");
            init_update_weights(&mut store, C_IN, D_H);
            let mut tape = Tape::inference();
            let (h, f_st, c_s, m_t, f_corr) = inputs(&mut tape, 9);
            let op = UpdateOperator::load(&mut tape, &store).unwrap();
            let (next, rev, conf) = op.step(&mut tape, h, f_st, c_s, m_t, f_corr).unwrap();
            (
                tape.value(next).clone(),
                tape.value(rev).clone(),
                tape.value(conf).clone(),
            )
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
        assert_eq!(a.2.data(), b.2.data());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut store = WeightStore::new(1, "kaiming-uniform");
        init_update_weights(&mut store, C_IN, D_H);
        let mut tape = Tape::inference();
        let (h, f_st, c_s, m_t, _) = inputs(&mut tape, 4);
        let bad = tape.input(DenseArray::zeros(&[1, H + 1, W]));
        let op = UpdateOperator::load(&mut tape, &store).unwrap();
        assert!(matches!(
            op.step(&mut tape, h, f_st, c_s, m_t, bad),
            Err(Error::ShapeMismatch(_))
        ));
    }

    /// Trainability certificate: gradients of the full step wrt every weight
    /// tensor match finite differences on a 4x4 instance.
    #[test]
    fn gradients_match_finite_differences() {
        let mut store = WeightStore::new(13, "kaiming-uniform");
        init_update_weights(&mut store, C_IN, D_H);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let mut arrays: Vec<DenseArray> = vec![
            DenseArray::seeded_gaussian(&[D_H, H, W], 70, 0.5),
            DenseArray::seeded_gaussian(&[2, H, W], 71, 1.0),
            DenseArray::seeded_gaussian(&[1, H, W], 72, 1.0),
            DenseArray::seeded_gaussian(&[2, H, W], 73, 1.0),
            DenseArray::seeded_gaussian(&[1, H, W], 74, 1.0),
        ];
        for name in &names {
            arrays.push(store.get(name).unwrap().clone());
        }
        crate::diff::tests::check_gradients(
            &arrays,
            |tape, vars| {
                let w = |n: &str| vars[5 + names.iter().position(|x| x == n).unwrap()];
                let op = UpdateOperator {
                    gru: GruWeights {
                        conv_z: w("upd.gru_z"),
                        bias_z: w("upd.gru_z.bias"),
                        conv_r: w("upd.gru_r"),
                        bias_r: w("upd.gru_r.bias"),
                        conv_h: w("upd.gru_h"),
                        bias_h: w("upd.gru_h.bias"),
                    },
                    rev1: w("upd.rev1"),
                    rev1_bias: w("upd.rev1.bias"),
                    rev2: w("upd.rev2"),
                    rev2_bias: w("upd.rev2.bias"),
                    conf1: w("upd.conf1"),
                    conf1_bias: w("upd.conf1.bias"),
                    conf2: w("upd.conf2"),
                    conf2_bias: w("upd.conf2.bias"),
                };
                let (_, rev, conf) =
                    op.step(tape, vars[0], vars[1], vars[2], vars[3], vars[4]).unwrap();
                let sr = tape.sum(rev);
                let sc = tape.sum(conf);
                tape.add(sr, sc).unwrap()
            },
            1e-4,
        );
    }

    #[test]
    fn zero_revision_reproduces_reprojection() {
        let mut flow = FlowField::zeros(3, 2);
        flow.u.iter_mut().enumerate().for_each(|(i, u)| *u = i as f64 * 0.1);
        flow.v.iter_mut().enumerate().for_each(|(i, v)| *v = -(i as f64) * 0.2);
        let p = apply_revision(&flow, &FlowField::zeros(3, 2));
        let grid = correspondence_grid(3, 2);
        for i in 0..6 {
            assert_eq!(p.data()[i], grid.data()[i] + flow.u[i]);
            assert_eq!(p.data()[6 + i], grid.data()[6 + i] + flow.v[i]);
        }
    }

    #[test]
    fn unit_x_revision_shifts_grid() {
        let mut rev = FlowField::zeros(4, 3);
        rev.u.iter_mut().for_each(|u| *u = 1.0);
        let p = apply_revision(&FlowField::zeros(4, 3), &rev);
        let grid = correspondence_grid(4, 3);
        for i in 0..12 {
            assert_eq!(p.data()[i], grid.data()[i] + 1.0);
            assert_eq!(p.data()[12 + i], grid.data()[12 + i]);
        }
    }
}
