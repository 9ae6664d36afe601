//! Backbones and the full network: feature extractor, contrastive projector,
//! class/transformation heads and the entropy predictor.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::cepredictor::PredictorHead;
use crate::datamodel::BackboneKind;
use crate::error::{Error, Result};
use crate::expansion::MultiTaskHeads;
use crate::nn::{Conv2d, ConvGeometry, Graph, Linear, Node, ParamStore, PoolGeometry};

/// Channel-major (`C·H·W`) row of an `H × W × C` image.
pub fn image_to_row(image: &Array3<f32>) -> Vec<f64> {
    let (h, w, c) = image.dim();
    let mut out = Vec::with_capacity(h * w * c);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.push(f64::from(image[[y, x, ch]]));
            }
        }
    }
    out
}

/// Stacks images into a batch of channel-major rows.
pub fn images_to_batch(images: &[Array3<f32>]) -> Result<Array2<f64>> {
    let len = images.first().map_or(0, |i| i.len());
    let mut flat = Vec::with_capacity(images.len() * len);
    for im in images {
        if im.len() != len {
            return Err(Error::input("images in one batch differ in size"));
        }
        flat.extend(image_to_row(im));
    }
    Array2::from_shape_vec((images.len(), len), flat).map_err(|e| Error::internal(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStage {
    conv: Conv2d,
    pool: Option<PoolGeometry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasicBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl BasicBlock {
    fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        hw: (usize, usize),
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv1"),
            conv_geom(in_c, hw, out_c, 3, stride, 1),
        );
        let g1 = conv1.geom;
        let conv2 = Conv2d::zeroed(
            store,
            &format!("{name}.conv2"),
            conv_geom(out_c, (g1.out_height(), g1.out_width()), out_c, 3, 1, 1),
        );
        let shortcut = (stride != 1 || in_c != out_c).then(|| {
            Conv2d::new(
                store,
                rng,
                &format!("{name}.shortcut"),
                conv_geom(in_c, hw, out_c, 1, stride, 0),
            )
        });
        Self {
            conv1,
            conv2,
            shortcut,
        }
    }

    fn out_hw(&self) -> (usize, usize) {
        (self.conv2.geom.out_height(), self.conv2.geom.out_width())
    }

    fn forward(&self, g: &mut Graph, x: Node, p: &[Node]) -> Result<Node> {
        let h = self.conv1.forward(g, x, p)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h, p)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, x, p)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }
}

fn conv_geom(
    in_c: usize,
    (h, w): (usize, usize),
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> ConvGeometry {
    ConvGeometry {
        in_channels: in_c,
        in_height: h,
        in_width: w,
        out_channels: out_c,
        kernel,
        stride,
        padding,
    }
}

/// Feature extractor. Every variant exposes one tap per stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backbone {
    Mlp {
        layers: Vec<Linear>,
    },
    Conv {
        stages: Vec<ConvStage>,
    },
    ResNet {
        stem: Conv2d,
        stem_pool: Option<PoolGeometry>,
        /// Blocks grouped by stage.
        stages: Vec<Vec<BasicBlock>>,
    },
}

impl Backbone {
    /// Builds the architecture for `channels × resolution × resolution` inputs.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        kind: BackboneKind,
        channels: usize,
        resolution: usize,
        hidden_dims: &[usize],
    ) -> Result<Self> {
        let hw = (resolution, resolution);
        match kind.resolve(resolution) {
            BackboneKind::Mlp => {
                if hidden_dims.is_empty() {
                    return Err(Error::config("hidden_dims: the mlp backbone needs at least one layer"));
                }
                let mut in_dim = channels * resolution * resolution;
                let mut layers = Vec::new();
                for (i, &w) in hidden_dims.iter().enumerate() {
                    layers.push(Linear::new(store, rng, &format!("backbone.fc{i}"), in_dim, w));
                    in_dim = w;
                }
                Ok(Backbone::Mlp { layers })
            }
            BackboneKind::Conv => {
                if hidden_dims.is_empty() {
                    return Err(Error::config("hidden_dims: the conv backbone needs at least one stage"));
                }
                let mut stages = Vec::new();
                let (mut in_c, mut cur) = (channels, hw);
                for (i, &w) in hidden_dims.iter().enumerate() {
                    let conv = Conv2d::new(
                        store,
                        rng,
                        &format!("backbone.conv{i}"),
                        conv_geom(in_c, cur, w, 3, 1, 1),
                    );
                    let pool = (cur.0 >= 2 && cur.1 >= 2).then_some(PoolGeometry {
                        channels: w,
                        in_height: cur.0,
                        in_width: cur.1,
                        kernel: 2,
                        stride: 2,
                        padding: 0,
                    });
                    if let Some(pg) = pool {
                        cur = (pg.out_height(), pg.out_width());
                    }
                    stages.push(ConvStage { conv, pool });
                    in_c = w;
                }
                Ok(Backbone::Conv { stages })
            }
            BackboneKind::ResNet20 => {
                let stem = Conv2d::new(store, rng, "backbone.stem", conv_geom(channels, hw, 16, 3, 1, 1));
                let stages = resnet_stages(store, rng, 16, hw, &[16, 32, 64], 3);
                Ok(Backbone::ResNet {
                    stem,
                    stem_pool: None,
                    stages,
                })
            }
            BackboneKind::ResNet18 => {
                let stem = Conv2d::new(store, rng, "backbone.stem", conv_geom(channels, hw, 64, 7, 2, 3));
                let pool = PoolGeometry {
                    channels: 64,
                    in_height: stem.geom.out_height(),
                    in_width: stem.geom.out_width(),
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                };
                let after = (pool.out_height(), pool.out_width());
                let stages = resnet_stages(store, rng, 64, after, &[64, 128, 256, 512], 2);
                Ok(Backbone::ResNet {
                    stem,
                    stem_pool: Some(pool),
                    stages,
                })
            }
            BackboneKind::Auto => Err(Error::internal("backbone kind left unresolved")),
        }
    }

    /// Channel count of each tap.
    pub fn tap_channels(&self) -> Vec<usize> {
        match self {
            Backbone::Mlp { layers } => layers.iter().map(|l| l.out_dim).collect(),
            Backbone::Conv { stages } => stages.iter().map(|s| s.conv.geom.out_channels).collect(),
            Backbone::ResNet { stages, .. } => stages
                .iter()
                .map(|s| s.last().map_or(0, |b| b.conv2.geom.out_channels))
                .collect(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.tap_channels().last().unwrap_or(&0)
    }

    /// `(taps, features)`; features are the globally pooled last stage.
    pub fn forward(&self, g: &mut Graph, x: Node, p: &[Node]) -> Result<(Vec<Node>, Node)> {
        let mut taps = Vec::new();
        match self {
            Backbone::Mlp { layers } => {
                let mut h = x;
                for (i, l) in layers.iter().enumerate() {
                    h = l.forward(g, h, p)?;
                    // the last layer is the linear embedding
                    if i + 1 < layers.len() {
                        h = g.relu(h);
                    }
                    taps.push(h);
                }
                Ok((taps, h))
            }
            Backbone::Conv { stages } => {
                let mut h = x;
                for s in stages {
                    let z = s.conv.forward(g, h, p)?;
                    h = g.relu(z);
                    if let Some(pg) = s.pool {
                        h = g.max_pool(h, pg)?;
                    }
                    taps.push(h);
                }
                let c = stages.last().map_or(1, |s| s.conv.geom.out_channels);
                let f = g.global_avg_pool(h, c)?;
                Ok((taps, f))
            }
            Backbone::ResNet {
                stem,
                stem_pool,
                stages,
            } => {
                let z = stem.forward(g, x, p)?;
                let mut h = g.relu(z);
                if let Some(pg) = stem_pool {
                    h = g.max_pool(h, *pg)?;
                }
                for stage in stages {
                    for b in stage {
                        h = b.forward(g, h, p)?;
                    }
                    taps.push(h);
                }
                let f = g.global_avg_pool(h, self.feature_dim())?;
                Ok((taps, f))
            }
        }
    }
}

fn resnet_stages<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    mut in_c: usize,
    mut hw: (usize, usize),
    widths: &[usize],
    blocks: usize,
) -> Vec<Vec<BasicBlock>> {
    let mut stages = Vec::new();
    for (s, &w) in widths.iter().enumerate() {
        let mut stage = Vec::new();
        for b in 0..blocks {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let block = BasicBlock::new(store, rng, &format!("backbone.s{s}b{b}"), in_c, w, hw, stride);
            hw = block.out_hw();
            in_c = w;
            stage.push(block);
        }
        stages.push(stage);
    }
    stages
}

/// Shape of a [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub backbone: BackboneKind,
    pub channels: usize,
    pub resolution: usize,
    pub hidden_dims: Vec<usize>,
    pub projection_dim: usize,
    pub reduce_dim: usize,
    /// Classes over the whole run (width of ψ and the predictor).
    pub num_classes: usize,
    pub num_transforms: usize,
}

/// Output nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub taps: Vec<Node>,
    /// Backbone features: prototypes, ψ and φ act on these.
    pub features: Node,
    /// Unit-norm projector output used by the contrastive loss.
    pub projection: Node,
}

/// All trainable parts of the model in one parameter store.
#[derive(Debug, Clone)]
pub struct Network {
    pub params: ParamStore,
    pub backbone: Backbone,
    pub projector: [Linear; 2],
    pub heads: MultiTaskHeads,
    pub predictor: PredictorHead,
    pub spec: NetworkSpec,
    /// Slots mirrored by the momentum key network (backbone and projector).
    pub key_slots: Vec<usize>,
}

impl Network {
    pub fn new<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let backbone = Backbone::new(
            &mut params,
            rng,
            spec.backbone,
            spec.channels,
            spec.resolution,
            &spec.hidden_dims,
        )?;
        let d = backbone.feature_dim();
        let projector = [
            Linear::new(&mut params, rng, "projector.0", d, d),
            Linear::new(&mut params, rng, "projector.1", d, spec.projection_dim),
        ];
        let key_slots = (0..params.len()).collect();
        let heads = MultiTaskHeads::new(&mut params, rng, d, spec.num_classes, spec.num_transforms);
        let predictor = PredictorHead::new(
            &mut params,
            rng,
            &backbone.tap_channels(),
            spec.reduce_dim,
            spec.num_classes,
        );
        Ok(Self {
            params,
            backbone,
            projector,
            heads,
            predictor,
            spec,
            key_slots,
        })
    }

    pub fn input_len(&self) -> usize {
        self.spec.channels * self.spec.resolution * self.spec.resolution
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn forward(&self, g: &mut Graph, x: Node, p: &[Node]) -> Result<Forward> {
        let (taps, features) = self.backbone.forward(g, x, p)?;
        let h = self.projector[0].forward(g, features, p)?;
        let h = g.relu(h);
        let h = self.projector[1].forward(g, h, p)?;
        let projection = g.normalize_rows(h);
        Ok(Forward {
            taps,
            features,
            projection,
        })
    }

    /// Backbone features and tap values of `x` under `tensors` (no gradients),
    /// evaluated in chunks of `chunk` rows.
    pub fn embed_with(
        &self,
        tensors: &[Array2<f64>],
        x: &Array2<f64>,
        chunk: usize,
    ) -> Result<Embedded> {
        let mut features = Vec::new();
        let mut projections = Vec::new();
        let mut taps: Vec<Vec<Array2<f64>>> = Vec::new();
        for start in (0..x.nrows()).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(x.nrows());
            let mut g = Graph::new();
            let p = crate::nn::bind_constants(&mut g, tensors);
            let xi = g.constant(x.slice(ndarray::s![start..end, ..]).to_owned());
            let out = self.forward(&mut g, xi, &p)?;
            features.push(g.value(out.features).clone());
            projections.push(g.value(out.projection).clone());
            taps.push(out.taps.iter().map(|&t| g.value(t).clone()).collect());
        }
        let cat = |parts: &[Array2<f64>], cols: usize| -> Result<Array2<f64>> {
            if parts.is_empty() {
                return Ok(Array2::zeros((0, cols)));
            }
            let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::internal(e.to_string()))
        };
        let n_taps = self.backbone.tap_channels().len();
        let tap_cols: Vec<usize> = taps.first().map_or(vec![0; n_taps], |t| t.iter().map(|a| a.ncols()).collect());
        let taps = (0..n_taps)
            .map(|k| {
                let parts: Vec<Array2<f64>> = taps.iter().map(|t| t[k].clone()).collect();
                cat(&parts, tap_cols[k])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Embedded {
            features: cat(&features, self.feature_dim())?,
            projections: cat(&projections, self.spec.projection_dim)?,
            taps,
        })
    }

    pub fn embed(&self, x: &Array2<f64>, chunk: usize) -> Result<Embedded> {
        self.embed_with(self.params.tensors(), x, chunk)
    }
}

/// Values of a gradient-free forward pass.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub features: Array2<f64>,
    pub projections: Array2<f64>,
    pub taps: Vec<Array2<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(kind: BackboneKind, res: usize, hidden: Vec<usize>) -> NetworkSpec {
        NetworkSpec {
            backbone: kind,
            channels: 3,
            resolution: res,
            hidden_dims: hidden,
            projection_dim: 8,
            reduce_dim: 4,
            num_classes: 5,
            num_transforms: 2,
        }
    }

    #[test]
    fn image_rows_are_channel_major() {
        let im = Array3::from_shape_fn((2, 2, 3), |(y, x, c)| (c * 100 + y * 10 + x) as f32);
        let row = image_to_row(&im);
        assert_eq!(row[..4], [0.0, 1.0, 10.0, 11.0]);
        assert_eq!(row[4], 100.0);
        assert_eq!(row.len(), 12);
    }

    #[test]
    fn backbone_shapes() {
        let cases = [
            (BackboneKind::Mlp, 8, vec![16, 8], vec![16, 8]),
            (BackboneKind::Conv, 8, vec![4, 6], vec![4, 6]),
            (BackboneKind::ResNet20, 8, vec![], vec![16, 32, 64]),
        ];
        for (kind, res, hidden, taps) in cases {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let net = Network::new(spec(kind, res, hidden), &mut rng).unwrap();
            assert_eq!(net.backbone.tap_channels(), taps);
            let x = Array2::from_shape_fn((3, net.input_len()), |(i, j)| ((i + j) % 7) as f64 / 7.0);
            let e = net.embed(&x, 2).unwrap();
            assert_eq!(e.features.dim(), (3, *taps.last().unwrap()));
            assert_eq!(e.projections.dim(), (3, 8));
            assert_eq!(e.taps.len(), taps.len());
            for r in e.projections.rows() {
                assert!((r.dot(&r) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn resnet18_tap_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let b = Backbone::new(&mut store, &mut rng, BackboneKind::Auto, 3, 224, &[]).unwrap();
        assert_eq!(b.tap_channels(), vec![64, 128, 256, 512]);
        let b = Backbone::new(&mut store, &mut rng, BackboneKind::Auto, 3, 28, &[]).unwrap();
        assert_eq!(b.tap_channels().len(), 3);
    }

    #[test]
    fn chunking_does_not_change_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::new(spec(BackboneKind::Mlp, 4, vec![8, 6]), &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, net.input_len()), |(i, j)| ((i * 3 + j) % 5) as f64);
        let a = net.embed(&x, 5).unwrap();
        let b = net.embed(&x, 2).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.taps[0], b.taps[0]);
    }
}
