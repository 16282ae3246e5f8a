use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sat3d_core::losses::{grad, tape, LossWeights, SegLoss};
use sat3d_core::losses::{critic_loss, dice_ce_loss, generator_adv_loss, total_generator_loss, uncertainty_masked_ce};
use sat3d_core::volgrid::{BinaryMask, ProbGrid, Spacing};
use sat3d_tensor::{Graph, ParamStore, Tensor};

const N: usize = 64; // 4^3
const H: f64 = 1e-4;

// Independent value oracles, written directly from the loss definitions.
fn ln_c(p: f64) -> f64 {
    p.clamp(1e-7, 1.0 - 1e-7).ln()
}
fn oracle_dice(p: &[f64], g: &[f64]) -> f64 {
    let i: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let s: f64 = p.iter().map(|a| a * a).sum::<f64>() + g.iter().map(|b| b * b).sum::<f64>();
    1.0 - (2.0 * i + 1e-5) / (s + 1e-5)
}
fn oracle_bce(p: &[f64], g: &[f64]) -> f64 {
    -p.iter().zip(g).map(|(&a, &b)| b * ln_c(a) + (1.0 - b) * ln_c(1.0 - a)).sum::<f64>() / p.len() as f64
}
fn oracle_adv(c: &[f64]) -> f64 {
    -c.iter().map(|&a| ln_c(a)).sum::<f64>() / c.len() as f64
}
fn oracle_fake(c: &[f64]) -> f64 {
    -c.iter().map(|&a| ln_c(1.0 - a)).sum::<f64>() / c.len() as f64
}
fn oracle_masked(p: &[f64], g: &[f64], c: &[f64], t: f64) -> f64 {
    let sel: Vec<usize> = (0..p.len()).filter(|&i| c[i] > t).collect();
    if sel.is_empty() {
        return 0.0;
    }
    -sel.iter().map(|&i| g[i] * ln_c(p[i])).sum::<f64>() / sel.len() as f64
}
fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn central_diff(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + H;
            let a = f(&y);
            y[i] = x[i] - H;
            let b = f(&y);
            y[i] = x[i];
            (a - b) / (2.0 * H)
        })
        .collect()
}

fn assert_close(analytic: &[f64], fd: &[f64], what: &str) {
    let mut worst = 0.0f64;
    for (a, f) in analytic.iter().zip(fd) {
        let scale = a.abs().max(f.abs());
        if scale > 1e-9 {
            worst = worst.max((a - f).abs() / scale);
        }
    }
    assert!(worst < 1e-3, "{what}: worst relative error {worst:e}");
}

struct Case {
    p: Vec<f64>,
    z: Vec<f64>,
    g: Vec<f64>,
    c: Vec<f64>,
}

fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..N).map(|_| rng.random_range(-3.0..3.0)).collect();
    let p = z.iter().map(|&v| sig(v)).collect();
    let g = (0..N).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let c = (0..N).map(|_| rng.random_range(0.02..0.98)).collect();
    Case { p, z, g, c }
}

#[test]
fn gradients_wrt_probabilities_match_finite_differences() {
    for seed in 0..5 {
        let k = random_case(seed);
        let d = grad::dice(&k.p, &k.g, 1e-5);
        assert!((d.value - oracle_dice(&k.p, &k.g)).abs() < 1e-12);
        assert_close(&d.grad, &central_diff(&k.p, |p| oracle_dice(p, &k.g)), "dice");
        let ce = grad::bce(&k.p, &k.g);
        assert_close(&ce.grad, &central_diff(&k.p, |p| oracle_bce(p, &k.g)), "ce");
        let adv = grad::neg_log(&k.c);
        assert_close(&adv.grad, &central_diff(&k.c, oracle_adv), "adversarial");
        let (real, fake) = grad::critic(&k.c, &k.p);
        assert_close(&real.grad, &central_diff(&k.c, oracle_adv), "critic real");
        assert_close(&fake.grad, &central_diff(&k.p, oracle_fake), "critic fake");
        let mask: Vec<bool> = k.c.iter().map(|&c| c > 0.3).collect();
        let m = grad::masked_ce(&k.p, &k.g, &mask);
        assert!((m.value - oracle_masked(&k.p, &k.g, &k.c, 0.3)).abs() < 1e-12);
        assert_close(&m.grad, &central_diff(&k.p, |p| oracle_masked(p, &k.g, &k.c, 0.3)), "masked ce T=0.3");
    }
}

#[test]
fn gradients_wrt_logits_match_finite_differences() {
    for seed in 10..15 {
        let k = random_case(seed);
        let probs = |z: &[f64]| z.iter().map(|&v| sig(v)).collect::<Vec<_>>();
        let mut seg: Vec<f64> = grad::dice(&k.p, &k.g, 1e-5).grad.iter().zip(grad::bce(&k.p, &k.g).grad).map(|(a, b)| a + b).collect();
        grad::through_sigmoid(&mut seg, &k.p);
        let fd = central_diff(&k.z, |z| {
            let p = probs(z);
            oracle_dice(&p, &k.g) + oracle_bce(&p, &k.g)
        });
        assert_close(&seg, &fd, "dice+ce logits");

        let mask: Vec<bool> = k.c.iter().map(|&c| c > 0.3).collect();
        let mut m = grad::masked_ce(&k.p, &k.g, &mask).grad;
        grad::through_sigmoid(&mut m, &k.p);
        assert_close(&m, &central_diff(&k.z, |z| oracle_masked(&probs(z), &k.g, &k.c, 0.3)), "masked logits");

        let mut a = grad::neg_log(&k.p).grad;
        grad::through_sigmoid(&mut a, &k.p);
        assert_close(&a, &central_diff(&k.z, |z| oracle_adv(&probs(z))), "adversarial logits");
    }
}

#[test]
fn tape_ops_backpropagate_to_logits() {
    let k = random_case(99);
    let mut store = ParamStore::new();
    let id = store.insert("z", Tensor::new(vec![4, 4, 4], k.z.iter().map(|&v| v as f32).collect()));
    let gt: Vec<f32> = k.g.iter().map(|&v| v as f32).collect();
    let crit: Vec<f32> = k.c.iter().map(|&v| v as f32).collect();
    let p32: Vec<f64> = k.z.iter().map(|&v| sig(v as f32 as f64)).collect();

    let g = Graph::new();
    let z = g.param(&store, id);
    let (l, parts) = tape::seg_loss(&z, &gt, 1e-5);
    let (u, _) = tape::masked_ce(&z, &gt, &crit, 0.3);
    let total = l.add(&u.scale(0.1));
    let grads = g.backward(&total);
    let analytic: Vec<f64> = grads.get(id).unwrap().data().iter().map(|&v| v as f64).collect();
    let fd = central_diff(&k.z, |z| {
        let p: Vec<f64> = z.iter().map(|&v| sig(v)).collect();
        oracle_dice(&p, &k.g) + oracle_bce(&p, &k.g) + 0.1 * oracle_masked(&p, &k.g, &k.c, 0.3)
    });
    for (a, f) in analytic.iter().zip(&fd) {
        assert!((a - f).abs() <= 1e-4 * f.abs().max(1e-3), "{a} vs {f}");
    }
    assert!((parts.total() - (oracle_dice(&p32, &k.g) + oracle_bce(&p32, &k.g))).abs() < 1e-9);
}

#[test]
fn tape_critic_loss_moves_logits_apart() {
    let mut store = ParamStore::new();
    let a = store.insert("real", Tensor::zeros(vec![8]));
    let b = store.insert("fake", Tensor::zeros(vec![8]));
    let g = Graph::new();
    let (l, v) = tape::critic_loss(&g.param(&store, a), &g.param(&store, b));
    assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
    let grads = g.backward(&l);
    assert!(grads.get(a).unwrap().data().iter().all(|&d| d < 0.0));
    assert!(grads.get(b).unwrap().data().iter().all(|&d| d > 0.0));
}

#[test]
fn masking_is_linear_over_disjoint_sets() {
    let k = random_case(3);
    let m1: Vec<bool> = (0..N).map(|i| i % 3 == 0).collect();
    let m2: Vec<bool> = (0..N).map(|i| i % 3 == 1).collect();
    let both: Vec<bool> = m1.iter().zip(&m2).map(|(a, b)| *a || *b).collect();
    let n1 = m1.iter().filter(|b| **b).count() as f64;
    let n2 = m2.iter().filter(|b| **b).count() as f64;
    let l1 = grad::masked_ce(&k.p, &k.g, &m1).value;
    let l2 = grad::masked_ce(&k.p, &k.g, &m2).value;
    let l = grad::masked_ce(&k.p, &k.g, &both).value;
    assert!((l - (n1 * l1 + n2 * l2) / (n1 + n2)).abs() < 1e-12);
}

#[test]
fn dice_is_permutation_invariant() {
    let k = random_case(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut perm: Vec<usize> = (0..N).collect();
    for i in (1..N).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let pp: Vec<f64> = perm.iter().map(|&i| k.p[i]).collect();
    let gp: Vec<f64> = perm.iter().map(|&i| k.g[i]).collect();
    assert!((grad::dice(&k.p, &k.g, 1e-5).value - grad::dice(&pp, &gp, 1e-5).value).abs() < 1e-12);
}

#[test]
fn total_identity_is_exact() {
    let w = LossWeights::default();
    let seg = SegLoss { dice: 0.25, ce: 0.25 };
    let r = total_generator_loss(seg, 2.0, 1.0, &w);
    assert_eq!(r.l_total, r.l_s + w.lambda_c * r.l_c + w.lambda_u * r.l_u);
    assert!((r.l_total - 0.62).abs() < 1e-15);
}

fn prob_grid(v: &[f64]) -> ProbGrid {
    ProbGrid::new([4, 4, 4], v.iter().map(|&x| x as f32).collect()).unwrap()
}

proptest! {
    #[test]
    fn losses_are_non_negative(seed in 0u64..10_000, sharpen in 0.0f64..20.0) {
        let k = random_case(seed);
        let p: Vec<f64> = k.z.iter().map(|&z| sig(z * sharpen)).collect();
        let gt = BinaryMask::new([4, 4, 4], k.g.iter().map(|&v| v as u8).collect(), Spacing::ISO).unwrap();
        let (pg, cg) = (prob_grid(&p), prob_grid(&k.c));
        let s = dice_ce_loss(&pg, &gt, 1e-5).unwrap();
        prop_assert!(s.dice >= 0.0 && s.ce >= 0.0);
        prop_assert!(generator_adv_loss(&pg) >= 0.0);
        prop_assert!(uncertainty_masked_ce(&pg, &gt, &cg, 0.3).unwrap() >= 0.0);
        prop_assert!(critic_loss(&cg, &pg).unwrap() >= 0.0);
    }
}
