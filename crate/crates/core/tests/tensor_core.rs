mod common;

use common::{gradcheck, noise};
use motionrnn_core::ops::{concat, concat_channels};
use motionrnn_core::{Error, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn elementwise_examples() {
    let tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::scalar(0.0));
    assert_eq!(z.sigmoid().value().item(), 0.5);
    assert_eq!(z.tanh().value().item(), 0.0);
    let a = tape.constant(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::from_f64([2], &[3.0, 4.0]).unwrap());
    assert_eq!(a.mul(b).unwrap().value().data(), &[3.0, 8.0]);
}

#[test]
fn broadcast_and_mismatch() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_fn([2, 3], |i| i as f64));
    let b = tape.constant(Tensor::from_f64([3], &[10.0, 20.0, 30.0]).unwrap());
    let s = a.add(b).unwrap();
    assert_eq!(s.shape(), vec![2, 3]);
    assert_eq!(s.value().data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
    let c = tape.constant(Tensor::zeros([2]));
    assert!(matches!(a.add(c), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn concat_channels_examples() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::ones([1, 2, 2]));
    let b = tape.constant(Tensor::zeros([1, 2, 2]));
    let c = concat_channels(&[a, b]).unwrap();
    assert_eq!(c.shape(), vec![2, 2, 2]);
    assert_eq!(c.value().data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);

    let x = tape.constant(noise(&[3, 4, 5], 1, 1.0));
    let y = tape.constant(noise(&[2, 4, 5], 2, 1.0));
    let xy = concat_channels(&[x, y]).unwrap();
    assert_eq!(*xy.slice(0, 0, 3).unwrap().value(), *x.value());
    assert_eq!(*xy.slice(0, 3, 2).unwrap().value(), *y.value());

    let bad = tape.constant(Tensor::zeros([1, 3, 2]));
    assert!(concat_channels(&[a, bad]).is_err());
}

#[test]
fn concat_gradient_is_ones() {
    let inputs = [noise(&[2, 3, 3], 3, 1.0), noise(&[1, 3, 3], 4, 1.0)];
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = concat_channels(&vars).unwrap().sum();
    let g = root.backward().unwrap();
    for v in &vars {
        assert!(g.get(*v).unwrap().data().iter().all(|&x| x == 1.0));
    }
    let report = gradcheck(&inputs, |_, v| Ok(concat_channels(v)?.square().sum()));
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn backward_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.param(noise(&[2, 3], 5, 1.0));
    let g = x.sum().backward().unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64([1], &[3.0]).unwrap());
    let g = x.mul(x).unwrap().sum().backward().unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_errors() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros([2]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    let other = Tape::<f64>::new();
    let y = other.param(Tensor::zeros([1])).sum();
    assert!(matches!(tape.backward(y), Err(Error::ForeignRoot)));
}

#[test]
fn random_three_op_chain_matches_finite_differences() {
    let inputs = [noise(&[3, 4], 11, 1.0), noise(&[4], 12, 1.0)];
    let report = gradcheck(&inputs, |_, v| {
        let y = v[0].mul(v[1])?.tanh();
        Ok(y.add(v[1])?.sigmoid().sum())
    });
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn every_op_matches_finite_differences() {
    let inputs = [noise(&[2, 3, 4], 21, 1.0), noise(&[2, 1, 4], 22, 1.0)];
    let report = gradcheck(&inputs, |_, v| {
        let a = v[0].sub(v[1])?.abs().scale(0.7).add_scalar(0.1);
        let b = v[0].permute(&[2, 0, 1])?.reshape([4, 6])?.square();
        let c = concat(&[a.reshape([4, 6])?, b], 0)?.slice(1, 1, 4)?;
        let parts = c.split(0, &[3, 5])?;
        parts[0].mean().add(parts[1].one_minus().tanh().sum())
    });
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn backward_is_deterministic() {
    let tape = Tape::<f64>::new();
    let x = tape.param(noise(&[4, 4], 31, 1.0));
    let w = tape.param(noise(&[4], 32, 1.0));
    let root = x.mul(w).unwrap().sigmoid().square().sum();
    let g1 = root.backward().unwrap();
    let g2 = root.backward().unwrap();
    assert_eq!(g1.get(x), g2.get(x));
    assert_eq!(g1.get(w), g2.get(w));
}

#[test]
fn constants_get_no_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.param(noise(&[3], 41, 1.0));
    let c = tape.constant(noise(&[3], 42, 1.0));
    let d = x.detach();
    let g = x.mul(c).unwrap().add(d).unwrap().sum().backward().unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(d).is_none());
    assert_eq!(g.get(x).unwrap().data(), c.value().data());
}

proptest! {
    #[test]
    fn broadcast_add_commutes(
        rows in 1usize..4,
        cols in 1usize..5,
        seed in any::<u64>(),
        broadcast in any::<bool>(),
    ) {
        let tape = Tape::<f64>::new();
        let a = tape.constant(noise(&[rows, cols], seed, 10.0));
        let bshape: Vec<usize> = if broadcast { vec![cols] } else { vec![rows, cols] };
        let b = tape.constant(noise(&bshape, seed ^ 1, 10.0));
        let ab = a.add(b).unwrap().value();
        let ba = b.add(a).unwrap().value();
        prop_assert_eq!(&*ab, &*ba);
    }

    #[test]
    fn reshape_permute_roundtrip(seed in any::<u64>()) {
        let tape = Tape::<f64>::new();
        let x = tape.constant(noise(&[2, 3, 4], seed, 1.0));
        let y = x.permute(&[1, 2, 0]).unwrap().permute(&[2, 0, 1]).unwrap();
        prop_assert_eq!(&*y.value(), &*x.value());
    }
}
