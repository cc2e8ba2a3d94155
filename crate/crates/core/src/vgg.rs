//! VGG16 trunk up to the third conv of block 3 (pre-activation), used as a
//! frozen feature extractor for the perceptual loss.

use std::path::Path;

use dpte_autograd::{Binding, Float, Mode, ParamStore, Tensor, Var};

use crate::container::{Container, Kind};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ParamBuilder};

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Layer names and widths; `None` marks a 2×2 max pool.
const LAYERS: [Option<(&str, usize, usize)>; 9] = [
    Some(("conv1_1", 3, 64)),
    Some(("conv1_2", 64, 64)),
    None,
    Some(("conv2_1", 64, 128)),
    Some(("conv2_2", 128, 128)),
    None,
    Some(("conv3_1", 128, 256)),
    Some(("conv3_2", 256, 256)),
    Some(("conv3_3", 256, 256)),
];

pub const FEATURE_CHANNELS: usize = 256;

#[derive(Clone, Debug)]
pub struct Vgg16 {
    convs: Vec<Option<Conv2d>>,
    store: ParamStore<f32>,
}

impl Vgg16 {
    /// Deterministic He-initialized weights, for use when no pretrained file
    /// is available.
    pub fn random(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, seed);
        let convs = LAYERS
            .iter()
            .map(|l| l.map(|(name, cin, cout)| Conv2d::new(&mut b, name, cin, cout, 3)))
            .collect();
        Self { convs, store }
    }

    /// Weights from a container holding `<layer>.weight` (`Cout×Cin×3×3`) and
    /// `<layer>.bias` for every layer.
    pub fn load(path: &Path) -> Result<Self> {
        let file = Container::load(path)?;
        if file.kind != Kind::Weights {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                reason: "expected a weights file".into(),
            });
        }
        let mut vgg = Self::random(0);
        for (id, entry) in vgg.store.clone().entries() {
            let t = file.tensor(&entry.name).ok_or_else(|| Error::Incompatible {
                path: path.to_path_buf(),
                reason: format!("missing tensor {}", entry.name),
            })?;
            if t.shape() != entry.value.shape() {
                return Err(Error::Incompatible {
                    path: path.to_path_buf(),
                    reason: format!("{} has shape {:?}, expected {:?}", entry.name, t.shape(), entry.value.shape()),
                });
            }
            *vgg.store.get_mut(id) = t.clone();
        }
        Ok(vgg)
    }

    /// Features of an `N×3×H×W` batch in `[0, 1]` (ImageNet-normalized internally).
    pub fn features<T: Float>(&self, x: &Var<T>) -> Result<Var<T>> {
        let store: ParamStore<T> = cast_store(&self.store);
        let b = Binding::new(&store, Mode::EVAL);
        let one = Var::constant(Tensor::ones(vec![3]));
        let zero = Var::constant(Tensor::zeros(vec![3]));
        let mean = IMAGENET_MEAN.map(T::from_f64_lossy);
        let var = IMAGENET_STD.map(|s| T::from_f64_lossy(s * s));
        let mut f = x.batch_norm_eval(&one, &zero, &mean, &var, T::zero());
        let last = self.convs.len() - 1;
        for (i, layer) in self.convs.iter().enumerate() {
            f = match layer {
                None => f.max_pool2(),
                Some(conv) => {
                    let y = conv.forward(&b, &f)?;
                    if i == last {
                        y
                    } else {
                        y.relu()
                    }
                }
            };
        }
        Ok(f)
    }
}

fn cast_store<T: Float>(src: &ParamStore<f32>) -> ParamStore<T> {
    let mut out = ParamStore::new();
    for (_, e) in src.entries() {
        out.add(e.name.clone(), e.kind, e.value.cast());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_shape_and_determinism() {
        let vgg = Vgg16::random(1);
        let x = Var::constant(Tensor::<f32>::from_fn(vec![1, 3, 16, 12], |i| (i % 5) as f32 / 4.0));
        let f = vgg.features(&x).unwrap();
        assert_eq!(f.shape(), &[1, FEATURE_CHANNELS, 4, 3]);
        assert_eq!(f.value(), Vgg16::random(1).features(&x).unwrap().value());
    }

    #[test]
    fn weights_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.bin");
        let vgg = Vgg16::random(3);
        let file = Container {
            kind: Kind::Weights,
            header: String::new(),
            tensors: vgg.store.entries().map(|(_, e)| (e.name.clone(), e.value.clone())).collect(),
        };
        file.save(&path).unwrap();
        let loaded = Vgg16::load(&path).unwrap();
        assert_eq!(loaded.store, vgg.store);
    }
}
