use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Integer class map over a 2D or 3D grid; class 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    shape: Vec<usize>,
    classes: Vec<u8>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(shape: Vec<usize>, classes: Vec<u8>, num_classes: usize) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != classes.len() {
            return Err(Error::InvalidShape {
                op: "label_map",
                detail: format!("shape {shape:?} needs {n} voxels, got {}", classes.len()),
            });
        }
        if !(2..=256).contains(&num_classes) {
            return Err(Error::InvalidArgument(format!(
                "class count must be in 2..=256, got {num_classes}"
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "class id {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            shape,
            classes,
            num_classes,
        })
    }

    pub fn filled(shape: &[usize], class: u8, num_classes: usize) -> Result<Self> {
        Self::new(shape.to_vec(), vec![class; shape.iter().product()], num_classes)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn count(&self, class: u8) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    /// One-hot encoding `[K, spatial...]`.
    pub fn one_hot<T: Scalar>(&self) -> Tensor<T> {
        let n = self.classes.len();
        let mut data = vec![T::zero(); self.num_classes * n];
        for (i, &c) in self.classes.iter().enumerate() {
            data[c as usize * n + i] = T::one();
        }
        let mut shape = vec![self.num_classes];
        shape.extend_from_slice(&self.shape);
        Tensor::new(shape, data).expect("one-hot shape")
    }

    /// Batched one-hot `[B, K, spatial...]`; all maps must agree on shape and K.
    pub fn stack_one_hot<T: Scalar>(maps: &[LabelMap]) -> Result<Tensor<T>> {
        let first = maps.first().ok_or_else(|| Error::InvalidShape {
            op: "stack_one_hot",
            detail: "no label maps".into(),
        })?;
        for m in maps {
            if m.shape != first.shape || m.num_classes != first.num_classes {
                return Err(Error::shape("stack_one_hot", &first.shape, &m.shape));
            }
        }
        Tensor::stack(&maps.iter().map(LabelMap::one_hot).collect::<Vec<_>>())
    }
}
