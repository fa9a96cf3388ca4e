use std::path::Path;

use anyhow::{bail, Context, Result};

use wsmooth::classifier::{Classifier, ConstantClassifier, DifferentiableClassifier, Network};
use wsmooth::flow::ImageShape;

/// A base classifier loaded from a checkpoint or built from a spec string.
pub enum Model {
    Constant(ConstantClassifier),
    Network(Network),
}

impl Model {
    /// `constant:<class>` or a checkpoint path.
    pub fn resolve(spec: &str, shape: ImageShape, num_classes: usize) -> Result<Self> {
        let model = if let Some(class) = spec.strip_prefix("constant:") {
            let class: usize = class.parse().with_context(|| format!("bad constant class in {spec:?}"))?;
            if class >= num_classes {
                bail!("constant class {class} is outside 0..{num_classes}");
            }
            Model::Constant(ConstantClassifier {
                class,
                num_classes,
                input_len: shape.input_len(),
            })
        } else {
            let (net, _) = Network::load(Path::new(spec)).with_context(|| format!("loading checkpoint {spec}"))?;
            if net.input_shape != shape {
                bail!("checkpoint expects images of shape {:?}, data has {:?}", net.input_shape, shape);
            }
            Model::Network(net)
        };
        if model.num_classes() < num_classes {
            bail!("model has {} classes, data has {num_classes}", model.num_classes());
        }
        Ok(model)
    }
}

impl Classifier for Model {
    fn num_classes(&self) -> usize {
        match self {
            Model::Constant(c) => c.num_classes(),
            Model::Network(n) => n.num_classes(),
        }
    }

    fn input_len(&self) -> usize {
        match self {
            Model::Constant(c) => c.input_len(),
            Model::Network(n) => n.input_len(),
        }
    }

    fn scores(&self, input: &[f64]) -> Vec<f64> {
        match self {
            Model::Constant(c) => c.scores(input),
            Model::Network(n) => n.scores(input),
        }
    }
}

impl DifferentiableClassifier for Model {
    fn score_gradient(&self, input: &[f64], class: usize) -> (Vec<f64>, Vec<f64>) {
        match self {
            Model::Constant(c) => c.score_gradient(input, class),
            Model::Network(n) => n.score_gradient(input, class),
        }
    }
}
