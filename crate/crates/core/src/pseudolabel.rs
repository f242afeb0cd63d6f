//! Teacher-side pseudo-labels: probabilities → hard labels → largest
//! connected component per class.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::scalar::Scalar;
use crate::segnet::{self, ModelParams, NetConfig};
use crate::tensor::Tensor;

/// Per-voxel probability tolerance before a map counts as unnormalized.
pub const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Two classes; foreground iff `p(fg) > 0.5`.
    Binary,
    /// Argmax with lowest-index tie-break.
    Multiclass,
}

impl LabelMode {
    pub fn for_classes(k: usize) -> Self {
        if k == 2 {
            LabelMode::Binary
        } else {
            LabelMode::Multiclass
        }
    }
}

/// Hard labels from a normalized probability map `[K, spatial...]`.
pub fn prob_to_label<T: Scalar>(prob: &Tensor<T>, mode: LabelMode) -> Result<LabelMap> {
    let shape = prob.shape();
    if shape.len() < 2 {
        return Err(Error::InvalidShape {
            op: "prob_to_label",
            detail: format!("expected [K, spatial...], got {shape:?}"),
        });
    }
    let k = shape[0];
    let n: usize = shape[1..].iter().product();
    if mode == LabelMode::Binary && k != 2 {
        return Err(Error::InvalidArgument(format!(
            "binary thresholding needs 2 channels, got {k}"
        )));
    }
    let p = prob.data();
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let sum: f64 = (0..k).map(|c| p[c * n + i].as_f64()).sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "probabilities at voxel {i} sum to {sum}, not 1"
            )));
        }
        let label = match mode {
            LabelMode::Binary => u8::from(p[n + i].as_f64() > 0.5),
            LabelMode::Multiclass => {
                let mut best = 0;
                for c in 1..k {
                    if p[c * n + i] > p[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            }
        };
        classes.push(label);
    }
    LabelMap::new(shape[1..].to_vec(), classes, k)
}

/// Flat indices of the face neighbours of `flat` (2·ndim at most).
pub(crate) fn face_neighbors(flat: usize, shape: &[usize], out: &mut Vec<usize>) {
    out.clear();
    let mut stride = 1;
    for d in (0..shape.len()).rev() {
        let c = (flat / stride) % shape[d];
        if c > 0 {
            out.push(flat - stride);
        }
        if c + 1 < shape[d] {
            out.push(flat + stride);
        }
        stride *= shape[d];
    }
}

/// Face-connected components of `class`, in order of their first voxel
/// (row-major scan).
pub fn components(label: &LabelMap, class: u8) -> Vec<Vec<usize>> {
    let shape = label.shape();
    let cls = label.classes();
    let mut seen = vec![false; cls.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    let mut nb = Vec::with_capacity(6);
    for start in 0..cls.len() {
        if seen[start] || cls[start] != class {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(v) = queue.pop_front() {
            comp.push(v);
            face_neighbors(v, shape, &mut nb);
            for &u in &nb {
                if !seen[u] && cls[u] == class {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        comps.push(comp);
    }
    comps
}

/// Keep only each foreground class's largest face-connected component;
/// everything removed becomes background. Ties go to the component whose
/// first voxel comes earliest in row-major order.
pub fn largest_connected_component(label: &LabelMap) -> LabelMap {
    let mut out = vec![0u8; label.len()];
    for class in 1..label.num_classes() {
        let comps = components(label, class as u8);
        let mut best: Option<&Vec<usize>> = None;
        for c in &comps {
            if best.map_or(true, |b| c.len() > b.len()) {
                best = Some(c);
            }
        }
        if let Some(best) = best {
            for &v in best {
                out[v] = class as u8;
            }
        }
    }
    LabelMap::new(label.shape().to_vec(), out, label.num_classes()).expect("same shape")
}

/// Teacher forward (nothing recorded) → softmax → hard labels → optional LCC,
/// one map per batch item of `x_u`.
pub fn make_pseudo_labels<T: Scalar>(
    cfg: &NetConfig,
    teacher: &ModelParams<T>,
    x_u: &Tensor<T>,
    mode: LabelMode,
    use_lcc: bool,
) -> Result<Vec<LabelMap>> {
    let probs = segnet::predict_probs(cfg, teacher, x_u)?;
    probs
        .unstack()
        .iter()
        .map(|p| {
            let hard = prob_to_label(p, mode)?;
            Ok(if use_lcc {
                largest_connected_component(&hard)
            } else {
                hard
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(k: usize, cols: &[&[f64]]) -> Tensor<f64> {
        let n = cols.len();
        let mut data = vec![0.0; k * n];
        for (i, c) in cols.iter().enumerate() {
            for (j, &v) in c.iter().enumerate() {
                data[j * n + i] = v;
            }
        }
        Tensor::new(vec![k, n], data).unwrap()
    }

    #[test]
    fn binary_threshold_is_strict() {
        let p = probs(2, &[&[0.4, 0.6], &[0.5, 0.5], &[0.9, 0.1]]);
        let l = prob_to_label(&p, LabelMode::Binary).unwrap();
        assert_eq!(l.classes(), &[1, 0, 0]);
    }

    #[test]
    fn argmax_with_low_index_ties() {
        let p = probs(3, &[&[0.2, 0.5, 0.3], &[0.4, 0.4, 0.2], &[0.1, 0.45, 0.45]]);
        let l = prob_to_label(&p, LabelMode::Multiclass).unwrap();
        assert_eq!(l.classes(), &[1, 0, 1]);
    }

    #[test]
    fn unnormalized_rejected() {
        let p = probs(2, &[&[0.4, 0.7]]);
        assert!(prob_to_label(&p, LabelMode::Binary).is_err());
        let p = probs(3, &[&[0.2, 0.5, 0.3]]);
        assert!(prob_to_label(&p, LabelMode::Binary).is_err());
    }

    fn map(rows: &[&str], k: usize) -> LabelMap {
        let h = rows.len();
        let w = rows[0].len();
        let cls = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| b - b'0'))
            .collect();
        LabelMap::new(vec![h, w], cls, k).unwrap()
    }

    #[test]
    fn single_component_unchanged() {
        let m = map(&["0110", "0110", "0000"], 2);
        assert_eq!(largest_connected_component(&m), m);
    }

    #[test]
    fn outlier_removed() {
        let m = map(&["1100", "1000", "0001"], 2);
        let want = map(&["1100", "1000", "0000"], 2);
        assert_eq!(largest_connected_component(&m), want);
    }

    #[test]
    fn diagonal_is_not_connected() {
        let m = map(&["10", "01"], 2);
        assert_eq!(largest_connected_component(&m), map(&["10", "00"], 2));
    }

    #[test]
    fn classes_filtered_independently() {
        let m = map(&["1102", "1002", "0202", "1000"], 3);
        let want = map(&["1102", "1002", "0002", "0000"], 3);
        assert_eq!(largest_connected_component(&m), want);
    }

    #[test]
    fn three_dimensional_faces() {
        let mut cls = vec![0u8; 27];
        cls[0] = 1;
        cls[9] = 1; // below voxel 0 along the slowest axis
        cls[26] = 1;
        let m = LabelMap::new(vec![3, 3, 3], cls, 2).unwrap();
        let out = largest_connected_component(&m);
        assert_eq!(out.count(1), 2);
        assert_eq!(out.classes()[26], 0);
    }

    #[test]
    fn zero_teacher_gives_background() {
        let cfg = NetConfig {
            num_classes: 2,
            base_width: 2,
            ..NetConfig::default()
        };
        let p = ModelParams::<f64>::zeros(&cfg);
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| i as f64 / 10.0);
        let labels = make_pseudo_labels(&cfg, &p, &x, LabelMode::Binary, true).unwrap();
        assert_eq!(labels.len(), 2);
        assert!(labels.iter().all(|l| l.count(0) == 64));
    }

    #[test]
    fn lcc_toggle_bypasses_filter() {
        let cfg = NetConfig {
            num_classes: 2,
            base_width: 2,
            depth: 1,
            seed: 3,
            ..NetConfig::default()
        };
        let mut p = ModelParams::<f64>::zeros(&cfg);
        // logit(fg) - logit(bg) = x through an identity-like chain
        p.get_mut("enc0.conv1.weight").unwrap().data_mut()[4] = 1.0;
        p.get_mut("enc0.conv2.weight").unwrap().data_mut()[4] = 1.0;
        p.get_mut("head.weight").unwrap().data_mut()[2] = 1.0;
        p.get_mut("head.bias").unwrap().data_mut()[1] = -0.5;
        let mut img = vec![0.0; 16];
        img[0] = 1.0;
        img[1] = 1.0;
        img[15] = 1.0;
        let x = Tensor::new(vec![1, 1, 4, 4], img).unwrap();
        let raw = make_pseudo_labels(&cfg, &p, &x, LabelMode::Binary, false).unwrap();
        assert_eq!(raw[0].count(1), 3);
        let filtered = make_pseudo_labels(&cfg, &p, &x, LabelMode::Binary, true).unwrap();
        assert_eq!(filtered[0].count(1), 2);
        assert_eq!(filtered, make_pseudo_labels(&cfg, &p, &x, LabelMode::Binary, true).unwrap());
    }
}
