use std::collections::HashSet;

use bcp_core::evalkit::{self, Bandwidth};
use bcp_core::loss::{self, LossConfig};
use bcp_core::mixer;
use bcp_core::pseudolabel::{self, LabelMode};
use bcp_core::segnet::{ema_update, EmaConfig};
use bcp_core::{Eager, LabelMap, Mask, ModelParams, Tensor};
use proptest::prelude::*;

const H: usize = 6;
const W: usize = 7;

fn label_map(k: usize) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0..k as u8, H * W).prop_map(move |c| LabelMap::new(vec![H, W], c, k).unwrap())
}

fn mask() -> impl Strategy<Value = Mask> {
    prop::collection::vec(0..2u8, H * W).prop_map(|b| Mask::from_bits(vec![H, W], b).unwrap())
}

fn image(c: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-5.0..5.0f64, c * H * W).prop_map(move |d| Tensor::new(vec![c, H, W], d).unwrap())
}

/// Softmax-normalized random probabilities `[B,K,H,W]`.
fn probs(b: usize, k: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(0.01..1.0f64, b * k * H * W).prop_map(move |mut d| {
        let n = H * W;
        for bi in 0..b {
            for v in 0..n {
                let s: f64 = (0..k).map(|c| d[(bi * k + c) * n + v]).sum();
                for c in 0..k {
                    d[(bi * k + c) * n + v] /= s;
                }
            }
        }
        Tensor::new(vec![b, k, H, W], d).unwrap()
    })
}

/// Flood-fill oracle: repeatedly relax each voxel to the smallest id among
/// its same-class face neighbors until nothing changes.
fn oracle_components(l: &LabelMap, class: u8) -> Vec<HashSet<usize>> {
    let c = l.classes();
    let mut id: Vec<usize> = (0..c.len()).collect();
    loop {
        let mut changed = false;
        for y in 0..H {
            for x in 0..W {
                let v = y * W + x;
                if c[v] != class {
                    continue;
                }
                let mut nb = vec![];
                if y > 0 {
                    nb.push(v - W);
                }
                if y + 1 < H {
                    nb.push(v + W);
                }
                if x > 0 {
                    nb.push(v - 1);
                }
                if x + 1 < W {
                    nb.push(v + 1);
                }
                for u in nb {
                    if c[u] == class && id[u] < id[v] {
                        id[v] = id[u];
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = (0..c.len()).filter(|&v| c[v] == class).map(|v| id[v]).collect();
    roots.sort();
    roots.dedup();
    roots
        .into_iter()
        .map(|r| (0..c.len()).filter(|&v| c[v] == class && id[v] == r).collect())
        .collect()
}

fn params(v: &[f64]) -> ModelParams<f64> {
    let mut m = std::collections::BTreeMap::new();
    m.insert("w".to_string(), Tensor::new(vec![v.len()], v.to_vec()).unwrap());
    ModelParams::from_map(m)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn paste_selects_voxelwise(a in image(2), b in image(2), m in mask()) {
        let ab = mixer::paste_image(&a, &b, &m).unwrap();
        let ba = mixer::paste_image(&b, &a, &m).unwrap();
        let n = H * W;
        for c in 0..2 {
            for (v, &bit) in m.bits().iter().enumerate() {
                let i = c * n + v;
                let want = if bit == 1 { a.data()[i] } else { b.data()[i] };
                prop_assert_eq!(ab.data()[i], want);
                // the two complementary pastes partition the pair
                prop_assert_eq!(ab.data()[i] + ba.data()[i], a.data()[i] + b.data()[i]);
            }
        }
    }

    #[test]
    fn bcp_mix_images_and_labels_agree(
        xl in image(1), xu in image(1), yl in label_map(3), yu in label_map(3), m in mask()
    ) {
        let (x_in, x_out) = mixer::bcp_mix_images(&xl, &xu, &xl, &xu, &m).unwrap();
        let (y_in, y_out) = mixer::bcp_mix_labels(&yl, &yu, &yl, &yu, &m).unwrap();
        for (v, &bit) in m.bits().iter().enumerate() {
            let from_l = bit == 1;
            prop_assert_eq!(x_in.data()[v], if from_l { xl.data()[v] } else { xu.data()[v] });
            prop_assert_eq!(y_in.classes()[v], if from_l { yl.classes()[v] } else { yu.classes()[v] });
            prop_assert_eq!(x_out.data()[v], if from_l { xu.data()[v] } else { xl.data()[v] });
            prop_assert_eq!(y_out.classes()[v], if from_l { yu.classes()[v] } else { yl.classes()[v] });
        }
    }

    #[test]
    fn components_match_flood_fill(l in label_map(3)) {
        for class in 0..3u8 {
            let mut got: Vec<HashSet<usize>> = pseudolabel::components(&l, class)
                .into_iter()
                .map(|c| c.into_iter().collect())
                .collect();
            let mut want = oracle_components(&l, class);
            let key = |s: &HashSet<usize>| *s.iter().min().unwrap();
            got.sort_by_key(key);
            want.sort_by_key(key);
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn lcc_keeps_one_largest_component(l in label_map(3)) {
        let out = pseudolabel::largest_connected_component(&l);
        for class in 1..3u8 {
            let comps = oracle_components(&l, class);
            let kept = oracle_components(&out, class);
            let biggest = comps.iter().map(|c| c.len()).max().unwrap_or(0);
            prop_assert!(kept.len() <= 1);
            prop_assert_eq!(kept.first().map_or(0, |c| c.len()), biggest);
            if let Some(k) = kept.first() {
                prop_assert!(comps.contains(k));
            }
        }
        for (i, &c) in out.classes().iter().enumerate() {
            prop_assert!(c == 0 || c == l.classes()[i]);
        }
        prop_assert_eq!(pseudolabel::largest_connected_component(&out), out);
    }

    #[test]
    fn argmax_labels_pick_a_maximum(p in probs(1, 4)) {
        let q = p.unstack().remove(0);
        let lab = pseudolabel::prob_to_label(&q, LabelMode::Multiclass).unwrap();
        let n = H * W;
        for v in 0..n {
            let c = lab.classes()[v] as usize;
            for j in 0..4 {
                let (pj, pc) = (q.data()[j * n + v], q.data()[c * n + v]);
                prop_assert!(pj < pc || (pj == pc && j >= c));
            }
        }
    }

    #[test]
    fn dice_and_jaccard_match_set_oracle(a in label_map(3), b in label_map(3)) {
        for class in 1..3u8 {
            let sa: HashSet<usize> = (0..H * W).filter(|&v| a.classes()[v] == class).collect();
            let sb: HashSet<usize> = (0..H * W).filter(|&v| b.classes()[v] == class).collect();
            let inter = sa.intersection(&sb).count() as f64;
            let d = evalkit::dice(&a, &b, class).unwrap();
            let j = evalkit::jaccard(&a, &b, class).unwrap();
            if sa.is_empty() && sb.is_empty() {
                prop_assert_eq!((d, j), (1.0, 1.0));
            } else {
                prop_assert!((d - 2.0 * inter / (sa.len() + sb.len()) as f64).abs() < 1e-12);
                prop_assert!((j - inter / sa.union(&sb).count() as f64).abs() < 1e-12);
                prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
            }
            prop_assert_eq!(d, evalkit::dice(&b, &a, class).unwrap());
        }
    }

    #[test]
    fn surface_metrics_are_symmetric_and_bounded(a in label_map(2), b in label_map(2)) {
        let (Ok(h), Ok(s)) = (evalkit::hd95(&a, &b, 1, None), evalkit::asd(&a, &b, 1, None)) else {
            return Ok(());
        };
        prop_assert_eq!(h, evalkit::hd95(&b, &a, 1, None).unwrap());
        prop_assert!((s - evalkit::asd(&b, &a, 1, None).unwrap()).abs() < 1e-12);
        let diag = (((H - 1) * (H - 1) + (W - 1) * (W - 1)) as f64).sqrt();
        prop_assert!(h >= 0.0 && h <= diag && s >= 0.0 && s <= diag);
        prop_assert_eq!(evalkit::hd95(&a, &a, 1, None).unwrap(), 0.0);
    }

    #[test]
    fn kde_is_order_invariant_and_normalized(
        xs in prop::collection::vec(-3.0..3.0f64, 2..40), seed in any::<u64>()
    ) {
        let mut shuffled = xs.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let grid = evalkit::linspace(-8.0, 8.0, 801);
        let a = evalkit::kde(&xs, &grid, Bandwidth::Fixed(0.4)).unwrap();
        let b = evalkit::kde(&shuffled, &grid, Bandwidth::Fixed(0.4)).unwrap();
        prop_assert_eq!(&a.density, &b.density);
        prop_assert!((a.integral() - 1.0).abs() < 1e-3);
        prop_assert!(a.density.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn kde_gap_is_a_bounded_symmetric_distance(
        a in prop::collection::vec(-3.0..3.0f64, 3..30),
        b in prop::collection::vec(-3.0..3.0f64, 3..30),
    ) {
        let g = evalkit::kde_gap(&a, &b).unwrap();
        prop_assert!((0.0..=2.0).contains(&g));
        prop_assert!((g - evalkit::kde_gap(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!(evalkit::kde_gap(&a, &a).unwrap() < 1e-12);
    }

    #[test]
    fn total_loss_is_the_sum_of_both_directions(
        qi in probs(2, 3), qo in probs(2, 3),
        yi in prop::collection::vec(label_map(3), 2), yo in prop::collection::vec(label_map(3), 2),
        m in mask(), alpha in 0.0..=1.0f64,
    ) {
        let cfg = LossConfig { alpha, ..LossConfig::default() };
        let out = loss::bcp_loss(&mut Eager, &qi, &qo, &yi, &yo, &m, &cfg).unwrap();
        let r = out.report;
        prop_assert!((r.l_all - (r.l_in + r.l_out)).abs() < 1e-12);
        prop_assert!(r.l_in >= 0.0 && r.l_out >= 0.0);
    }

    #[test]
    fn bcp_weights_are_complementary(m in mask(), alpha in 0.0..=1.0f64) {
        let (wi, wo) = loss::bcp_weights::<f64>(std::slice::from_ref(&m), alpha).unwrap();
        for (v, &bit) in m.bits().iter().enumerate() {
            let (a, b) = (wi.data()[v], wo.data()[v]);
            prop_assert!((a + b - (1.0 + alpha)).abs() < 1e-12);
            prop_assert_eq!(a, if bit == 1 { 1.0 } else { alpha });
        }
    }

    #[test]
    fn ema_interpolates(
        t in prop::collection::vec(-2.0..2.0f64, 5), s in prop::collection::vec(-2.0..2.0f64, 5),
        lambda in 0.0..=1.0f64,
    ) {
        let mut teacher = params(&t);
        ema_update(&mut teacher, &params(&s), &EmaConfig { lambda }).unwrap();
        let got = teacher.get("w").unwrap().data();
        for i in 0..5 {
            let (lo, hi) = (t[i].min(s[i]), t[i].max(s[i]));
            prop_assert!(got[i] >= lo - 1e-12 && got[i] <= hi + 1e-12);
            prop_assert!((got[i] - (lambda * t[i] + (1.0 - lambda) * s[i])).abs() < 1e-12);
        }
        let mut frozen = params(&t);
        ema_update(&mut frozen, &params(&s), &EmaConfig { lambda: 1.0 }).unwrap();
        prop_assert_eq!(frozen.get("w").unwrap().data(), &t[..]);
    }
}
